"""Command-line entry point: ``rgbd-atlas <align|map|merge|fuse|eval|synth>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, PipelineConfig, dumps_config, load_config
from .io import DatasetError


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "d2c", False):
        import dataclasses

        cfg = dataclasses.replace(cfg, align=dataclasses.replace(cfg.align, mode="d2c"))
    return cfg


def _cmd_align(args) -> None:
    pipeline.align(args.input, args.output, _config(args).align)


def _cmd_map(args) -> None:
    s = pipeline.map_session(args.input, args.output, _config(args))
    print(
        f"{s.frames} frames, {s.keyframes} keyframes, {s.loops} loop edges, "
        f"{s.lost_frames} lost, {s.components} component(s)",
        file=sys.stderr,
    )


def _cmd_merge(args) -> None:
    s = pipeline.merge(args.inputs, args.output, _config(args))
    print(f"merged {s.sessions} sessions; cross edges per session {s.cross_edges}", file=sys.stderr)


def _cmd_fuse(args) -> None:
    s = pipeline.fuse(args.input, args.trajectory, args.output, _config(args), args.keyframes)
    print(f"{s.segments} segments, {s.vertices} vertices, {s.triangles} triangles", file=sys.stderr)


def _cmd_eval(args) -> None:
    metrics = pipeline.evaluate(args.recon, args.gt, args.traj_est, args.traj_gt, _config(args))
    json.dump(metrics, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _cmd_synth(args) -> None:
    params = None
    if args.params:
        try:
            params = json.loads(args.params)
        except json.JSONDecodeError as exc:
            raise pipeline.InputError(f"--params: invalid JSON ({exc.msg})") from None
    opts = pipeline.SynthOptions(
        scene=args.scene,
        trajectory=args.trajectory,
        frames=args.frames,
        first_frame=args.first_frame,
        total_frames=args.total_frames,
        noise=not args.no_noise,
        noise_seed=args.noise_seed,
        texture_seed=args.texture_seed,
        time_offset=args.time_offset,
        params=params,
    )
    pipeline.synth(args.output, opts)


def _cmd_config(args) -> None:
    sys.stdout.write(dumps_config(_config(args)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbd-atlas", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="pipeline configuration JSON")
        return sp

    sp = add("align", _cmd_align, "align colour to depth (or depth to colour)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--d2c", action="store_true", help="depth-to-colour ablation mode")

    sp = add("map", _cmd_map, "map a single session")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--d2c", action="store_true")

    sp = add("merge", _cmd_merge, "merge mapped sessions, in the given order")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--output", required=True)

    sp = add("fuse", _cmd_fuse, "fuse a dataset into a mesh along a trajectory")
    sp.add_argument("--input", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--output", required=True, help="mesh PLY; the fused cloud goes to <stem>_cloud.ply")
    sp.add_argument("--keyframes", help="fuse only the frame indices listed in this file")
    sp.add_argument("--d2c", action="store_true")

    sp = add("eval", _cmd_eval, "print reconstruction and trajectory metrics as JSON")
    sp.add_argument("--recon", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--traj-est", action="append", default=[], help="repeat once per session")
    sp.add_argument("--traj-gt", action="append", default=[])

    sp = add("synth", _cmd_synth, "render a synthetic dataset with ground truth")
    sp.add_argument("--output", required=True)
    sp.add_argument("--scene", default="corridor", choices=("corridor", "corner"))
    sp.add_argument("--trajectory", default="corridor_loop", choices=("corridor_loop", "orbit", "teleport_gap"))
    sp.add_argument("--frames", type=int, default=300)
    sp.add_argument("--first-frame", type=int, default=0)
    sp.add_argument("--total-frames", type=int, help="length of the trajectory the frames are sliced from")
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--noise-seed", type=int, default=0)
    sp.add_argument("--texture-seed", type=int, default=0)
    sp.add_argument("--time-offset", type=float, default=0.0)
    sp.add_argument("--params", help="trajectory parameters as a JSON object")

    sp = add("config", _cmd_config, "print the effective configuration")
    sp.add_argument("--d2c", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return pipeline.EXIT_INPUT if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        # BLAS threading would make floating-point reductions depend on the machine
        with threadpool_limits(limits=1):
            args.func(args)
    except pipeline.PipelineError as exc:
        print(f"rgbd-atlas {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetError) as exc:
        print(f"rgbd-atlas {args.command}: {exc}", file=sys.stderr)
        return pipeline.EXIT_INPUT
    return pipeline.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
