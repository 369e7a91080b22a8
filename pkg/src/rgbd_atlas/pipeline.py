"""The six pipeline commands: synth, align, map, merge, fuse and eval.

Each command reads and writes the on-disk layouts in :mod:`rgbd_atlas.io`
and raises a :class:`PipelineError` subclass carrying its exit code.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as dio
from ._parallel import parallel_map
from .config import AlignConfig, EvalConfig, FuseConfig, PipelineConfig, dumps_config
from .evaluation import align_sessions, ate_sessions, overlap_rmse, rpe_sessions
from .geometry import DegenerateInputError, DepthImage, Pose
from .imaging import (
    AlignedColor,
    ColorImage,
    align_color_to_depth,
    align_depth_to_color,
    inpaint_color_holes,
    inpaint_depth_linear,
)
from .loop_closure import (
    BowDatabase,
    LoopKeyframe,
    bow_signature,
    build_vocabulary,
    detect_features,
    estimate_loop_transform,
    query,
)
from .odometry import ScanToMapOdometry
from .pose_graph import Edge, GraphError, MergeError, PoseGraph, dumps_graph, loads_graph, merge_sessions, optimize
from .sift import Feature, descriptor_matrix
from .surface import build_view_cloud, fuse_segments, kmeans_partition, sample_mesh
from . import synthetic

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ODOMETRY = 3
EXIT_MERGE = 4

MASK_REPROJECTED = 255
MASK_INPAINTED = 128
# merged graph vertex ids are session * SESSION_STRIDE + frame index
SESSION_STRIDE = 10_000_000


class PipelineError(Exception):
    code = 1


class InputError(PipelineError):
    code = EXIT_INPUT


class OdometryFailure(PipelineError):
    code = EXIT_ODOMETRY


class MergeFailure(PipelineError):
    code = EXIT_MERGE


def _input_guard(fn):
    """Re-raise malformed-input exceptions as :class:`InputError`."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except dio.DatasetError as exc:
            raise InputError(str(exc)) from None

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthOptions:
    scene: str = "corridor"
    trajectory: str = "corridor_loop"
    frames: int = 300
    first_frame: int = 0
    total_frames: int | None = None
    noise: bool = True
    noise_seed: int = 0
    texture_seed: int = 0
    time_offset: float = 0.0
    gt_density: float = 40000.0
    gt_voxel: float = 0.01
    gt_pose_stride: int = 2
    params: dict | None = None


def _scene(name: str, texture_seed: int) -> synthetic.Scene:
    if name == "corridor":
        return synthetic.corridor_scene(texture_seed)
    if name == "corner":
        return dataclasses.replace(synthetic.corner_scene(), texture_seed=texture_seed)
    raise InputError(f"unknown scene {name!r}")


def synth(output, opts: SynthOptions = SynthOptions()) -> None:
    """Render a dataset plus ``groundtruth.txt`` and ``gt_cloud.ply``."""
    if opts.frames < 2:
        raise InputError("synth needs at least 2 frames")
    total = opts.total_frames or opts.first_frame + opts.frames
    if opts.first_frame < 0 or opts.first_frame + opts.frames > total:
        raise InputError("frame slice lies outside the trajectory")
    scene = _scene(opts.scene, opts.texture_seed)
    try:
        traj = synthetic.make_trajectory(opts.trajectory, total, opts.params)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    traj = [(t + opts.time_offset, p) for t, p in traj[opts.first_frame : opts.first_frame + opts.frames]]
    kd = synthetic.default_depth_intrinsics()
    kc = synthetic.default_color_intrinsics()
    rig = synthetic.default_rig()
    noise = synthetic.NoiseModel(seed=opts.noise_seed) if opts.noise else None

    def render(i):
        _, pose = traj[i]
        gi = opts.first_frame + i
        depth = synthetic.render_depth(scene, pose, kd, noise, gi)
        color = synthetic.render_color(scene, pose @ rig.color_to_depth, kc)
        return dio.pgm_bytes(depth.data), dio.ppm_bytes(color)

    rendered = parallel_map(render, range(len(traj)))
    cloud = synthetic.sample_scene_cloud(scene, opts.gt_density, opts.texture_seed)
    from .evaluation import voxel_downsample_centroid

    cloud = voxel_downsample_centroid(cloud, opts.gt_voxel)
    cloud = synthetic.visible_subset(cloud, scene, [p for _, p in traj[:: opts.gt_pose_stride]], kd)
    with dio.staged_output(output) as stage:
        for i, (d, c) in enumerate(rendered):
            dio.atomic_write_bytes(stage / "depth" / dio.frame_name(i, "pgm"), d)
            dio.atomic_write_bytes(stage / "color" / dio.frame_name(i, "ppm"), c)
        dio.write_timestamps(stage / "timestamps.txt", [t for t, _ in traj])
        dio.write_intrinsics(stage / "intrinsics.json", kd, kc, rig)
        dio.write_trajectory(stage / "groundtruth.txt", traj)
        dio.write_ply(stage / "gt_cloud.ply", cloud.points)


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------


def _encode_mask(a: AlignedColor) -> np.ndarray:
    m = np.zeros(a.valid_mask.shape, dtype=np.uint8)
    m[a.valid_mask] = MASK_INPAINTED
    m[a.source_mask] = MASK_REPROJECTED
    return m


def _decode_mask(img: ColorImage, m: np.ndarray) -> AlignedColor:
    return AlignedColor(img, m > 0, m == MASK_REPROJECTED)


def c2d_frame(ds: dio.Dataset, i: int, cfg: AlignConfig) -> AlignedColor:
    d = ds.depth(i)
    color = ds.color(i)
    k2 = ds.k_depth.scaled(2)
    if not (d.data > 0).any():
        empty = np.zeros((k2.height, k2.width), dtype=bool)
        return AlignedColor(ColorImage(np.zeros((k2.height, k2.width, 3), np.uint8)), empty, empty.copy())
    a = align_color_to_depth(color, inpaint_depth_linear(d), ds.k_depth, ds.k_color, ds.rig)
    if cfg.inpaint_iterations > 0:
        a = inpaint_color_holes(a, cfg.inpaint_iterations)
    return a


def d2c_depth(ds: dio.Dataset, i: int) -> DepthImage:
    return align_depth_to_color(ds.depth(i), ds.k_depth, ds.k_color, ds.rig)


def _align_into(ds: dio.Dataset, stage: Path, cfg: AlignConfig) -> None:
    def one(i):
        if cfg.mode == "c2d":
            a = c2d_frame(ds, i, cfg)
            return dio.ppm_bytes(a.image), dio.pgm_bytes(_encode_mask(a), 255), None
        color = ds.color(i)
        full = np.full(color.data.shape[:2], MASK_REPROJECTED, dtype=np.uint8)
        return dio.ppm_bytes(color), dio.pgm_bytes(full, 255), dio.pgm_bytes(d2c_depth(ds, i).data, 65535)

    for i, (img, mask, depth) in enumerate(parallel_map(one, range(len(ds)))):
        dio.atomic_write_bytes(stage / "aligned" / dio.frame_name(i, "ppm"), img)
        dio.atomic_write_bytes(stage / "aligned_mask" / dio.frame_name(i, "pgm"), mask)
        if depth is not None:
            dio.atomic_write_bytes(stage / "aligned_depth" / dio.frame_name(i, "pgm"), depth)
    k = ds.k_depth.scaled(2) if cfg.mode == "c2d" else ds.k_color
    meta = {"mode": cfg.mode, "frames": len(ds), "intrinsics": k.to_dict()}
    dio.atomic_write_text(stage / "alignment.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


@_input_guard
def align(input_dir, output, cfg: AlignConfig = AlignConfig()) -> None:
    """Write ``aligned/``, ``aligned_mask/`` (and ``aligned_depth/`` for D2C)."""
    ds = dio.load_dataset(input_dir)
    with dio.staged_output(output) as stage:
        _align_into(ds, stage, cfg)


def _find_alignment(dirs, mode: str, n: int) -> Path | None:
    for d in dirs:
        meta = Path(d) / "alignment.json"
        if meta.is_file():
            try:
                info = json.loads(meta.read_text())
            except json.JSONDecodeError:
                continue
            if info.get("mode") == mode and info.get("frames") == n:
                return Path(d)
    return None


# ---------------------------------------------------------------------------
# map
# ---------------------------------------------------------------------------


def odometry_information(rmse: float, cfg) -> np.ndarray:
    r = max(float(rmse) if np.isfinite(rmse) else cfg.min_rmse, cfg.min_rmse)
    return np.diag([cfg.rotation_information] * 3 + [1.0 / (r * r)] * 3)


def loop_information(inliers: int, icp_rmse: float, min_inliers: int, cfg) -> np.ndarray:
    return odometry_information(icp_rmse, cfg) * (inliers / min_inliers)


def _save_features(path: Path, kf_ids: list[int], feats: list[list[Feature]]) -> None:
    allf = [f for fs in feats for f in fs]
    import io as _io

    buf = _io.BytesIO()
    np.savez(
        buf,
        keyframes=np.asarray(kf_ids, dtype=np.int64),
        counts=np.asarray([len(fs) for fs in feats], dtype=np.int64),
        positions=np.asarray([f.position for f in allf], dtype=float).reshape(-1, 2),
        scales=np.asarray([f.scale for f in allf], dtype=float),
        orientations=np.asarray([f.orientation for f in allf], dtype=float),
        contrasts=np.asarray([f.contrast for f in allf], dtype=float),
        descriptors=descriptor_matrix(allf),
    )
    dio.atomic_write_bytes(path, buf.getvalue())


def _load_features(path: Path) -> dict[int, list[Feature]]:
    try:
        z = np.load(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read features ({exc})") from None
    out = {}
    pos = 0
    for kf, c in zip(z["keyframes"], z["counts"]):
        out[int(kf)] = [
            Feature(
                (float(z["positions"][j, 0]), float(z["positions"][j, 1])),
                float(z["scales"][j]),
                float(z["orientations"][j]),
                z["descriptors"][j].copy(),
                float(z["contrasts"][j]),
            )
            for j in range(pos, pos + int(c))
        ]
        pos += int(c)
    return out


class _FrameSource:
    """Depth, features and intrinsics as seen by mapping in one alignment mode."""

    def __init__(self, ds: dio.Dataset, aligned_dir: Path | None, mode: str):
        self.ds = ds
        self.aligned = aligned_dir
        self.mode = mode
        if mode == "c2d":
            self.k = ds.k_depth
            self.lift_scale = 0.5
        else:
            self.k = ds.k_color
            self.lift_scale = 1.0

    def depth(self, i: int) -> DepthImage:
        if self.mode == "c2d":
            return self.ds.depth(i)
        path = self.aligned / "aligned_depth" / dio.frame_name(i, "pgm")
        return DepthImage(dio.read_pgm(path).astype(np.uint16))

    def aligned_color(self, i: int) -> AlignedColor:
        img = dio.read_ppm(self.aligned / "aligned" / dio.frame_name(i, "ppm"))
        m = dio.read_pgm(self.aligned / "aligned_mask" / dio.frame_name(i, "pgm"))
        if m.shape != img.data.shape[:2]:
            raise InputError(f"{self.aligned / 'aligned_mask' / dio.frame_name(i, 'pgm')}: size mismatch")
        return _decode_mask(img, m)

    def to_depth_camera(self, pose: Pose) -> Pose:
        """Trajectory poses are always reported for the depth camera."""
        if self.mode == "c2d":
            return pose
        return pose @ self.ds.rig.color_to_depth.inverse()


@dataclass
class MapSummary:
    frames: int
    keyframes: int
    lost_frames: int
    map_breaks: list
    loops: int
    components: int


def _verify_candidates(pairs, cfg: PipelineConfig):
    """Verify ``(kf_a, kf_b)`` pairs in parallel; order of results follows input."""

    def one(pair):
        a, b = pair
        return estimate_loop_transform(a, b, cfg.loop, cfg.odometry.icp, seed=cfg.seed)

    return parallel_map(one, pairs)


def _optimize_components(graph: PoseGraph, cfg) -> list:
    reports = []
    comps = graph.components()
    if len(comps) == 1:
        return [optimize(graph, cfg.max_iterations, cfg.lambda_init, cfg.relative_tolerance)]
    for comp in sorted(comps, key=lambda c: min(c)):
        sub = PoseGraph()
        for n in sorted(comp):
            sub.add_node(n, graph.pose(n), graph.nodes[n][1])
        for e in graph.edges:
            if e.from_id in comp:
                sub.add_edge(e)
        sub.anchor = min(comp)
        reports.append(optimize(sub, cfg.max_iterations, cfg.lambda_init, cfg.relative_tolerance))
        for n in comp:
            graph.set_pose(n, sub.pose(n))
    return reports


@_input_guard
def map_session(input_dir, output, cfg: PipelineConfig = PipelineConfig()) -> MapSummary:
    """Single-session mapping: odometry, loop closure and pose-graph optimisation."""
    ds = dio.load_dataset(input_dir)
    n = len(ds)
    with dio.staged_output(output) as stage:
        aligned = _find_alignment([Path(input_dir), Path(output)], cfg.align.mode, n)
        if aligned is None:
            _align_into(ds, stage, cfg.align)
            aligned = stage
        src = _FrameSource(ds, aligned, cfg.align.mode)

        tracker = ScanToMapOdometry(src.k, cfg.odometry)
        results = []
        for i in range(n):
            results.append(tracker.track(i, src.depth(i)))
        lost = [i for i, (r, _) in enumerate(results) if r.status == "lost"]
        breaks = [i for i in range(1, n) if results[i][1] != results[i - 1][1]]
        if len(lost) > cfg.graph.lost_fraction_max * n:
            raise OdometryFailure(
                f"odometry lost on {len(lost)} of {n} frames; map breaks at frames {breaks[:10]}"
                + (" ..." if len(breaks) > 10 else "")
            )
        keyframes = tracker.keyframes  # (frame index, odometry pose, map id)
        kf_index = [k for k, _, _ in keyframes]

        feats = parallel_map(
            lambda kf: detect_features(src.aligned_color(kf[0]), cfg.loop.max_features), keyframes
        )
        depth_cache = {k: src.depth(k) for k in kf_index}
        loop_kfs = [LoopKeyframe(k, f, depth_cache[k], src.k, src.lift_scale) for k, f in zip(kf_index, feats)]

        graph = PoseGraph()
        for k, pose, mid in keyframes:
            graph.add_node(k, pose, 0)
        for (ka, pa, ma), (kb, pb, mb) in zip(keyframes, keyframes[1:]):
            if ma == mb:
                info = odometry_information(results[kb][0].rmse, cfg.graph)
                graph.add_edge(Edge(ka, kb, pa.inverse() @ pb, info, "odometry"))
        graph.anchor = kf_index[0]

        loops = 0
        docs = [descriptor_matrix(f) for f in feats]
        if sum(len(d) for d in docs):
            vocab = build_vocabulary(docs, cfg.loop.vocabulary_size, cfg.loop.vocabulary_seed)
            db = BowDatabase()
            for j, (k, _, mid) in enumerate(keyframes):
                sig = bow_signature(feats[j], vocab)
                cands = query(db, sig, cfg.loop.top_k, cfg.loop.exclusion_window, 0, j, mid, cfg.loop.min_similarity)
                pairs = [(loop_kfs[c], loop_kfs[j]) for c, _ in cands]
                for c, res in zip(cands, _verify_candidates(pairs, cfg)):
                    if res is None:
                        continue
                    info = loop_information(res.inliers, res.icp_rmse, cfg.loop.min_inliers, cfg.graph)
                    graph.add_edge(Edge(res.from_kf, res.to_kf, res.relative, info, "loop"))
                    loops += 1
                db.add(j, 0, j, sig, mid)
        comps_before = len({m for _, _, m in keyframes})
        try:
            _optimize_components(graph, cfg.graph)
        except GraphError as exc:
            raise OdometryFailure(f"pose-graph optimisation failed: {exc}") from None
        components = len(graph.components())
        if components > 1:
            log.warning("map has %d disconnected components (breaks at frames %s)", components, breaks)

        # every frame hangs off the latest keyframe of its own map
        traj = []
        frame_kf = []
        kf_by_map: dict[int, int] = {}
        kf_pos = {k: (p, m) for k, p, m in keyframes}
        for i, (r, mid) in enumerate(results):
            if i in kf_pos and kf_pos[i][1] == mid:
                kf_by_map[mid] = i
            kf = kf_by_map[mid]
            odo_kf = kf_pos[kf][0]
            pose = graph.pose(kf) @ odo_kf.inverse() @ r.pose
            traj.append((ds.timestamps[i], src.to_depth_camera(pose)))
            frame_kf.append(kf)

        dio.write_trajectory(stage / "trajectory.txt", traj)
        dio.atomic_write_text(stage / "graph.txt", dumps_graph(graph))
        dio.atomic_write_text(stage / "keyframes.txt", "".join(f"{k}\n" for k in kf_index))
        dio.atomic_write_text(
            stage / "frames.txt",
            "".join(
                f"{i} {frame_kf[i]} {mid} {r.status} {r.fitness!r} {r.rmse!r}\n"
                for i, (r, mid) in enumerate(results)
            ),
        )
        _save_features(stage / "features.npz", kf_index, feats)
        session = {
            "dataset": str(Path(input_dir).resolve()),
            "alignment": cfg.align.mode,
            "aligned_dir": "." if aligned == stage else str(Path(aligned).resolve()),
            "frames": n,
            "keyframes": len(kf_index),
            "lost_frames": lost,
            "map_breaks": breaks,
            "maps_before_loop_closure": comps_before,
            "components": components,
            "loop_edges": loops,
        }
        dio.atomic_write_text(stage / "session.json", json.dumps(session, indent=2, sort_keys=True) + "\n")
        dio.atomic_write_text(stage / "config.json", dumps_config(cfg))
    return MapSummary(n, len(kf_index), len(lost), breaks, loops, components)


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


@dataclass
class _Session:
    path: Path
    ds: dio.Dataset
    src: _FrameSource
    graph: PoseGraph
    keyframes: list[int]
    features: dict
    trajectory: list
    frame_kf: list[int]


def _load_session(path: Path, cfg: PipelineConfig) -> _Session:
    meta_path = path / "session.json"
    if not meta_path.is_file():
        raise InputError(f"missing file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        dataset = meta["dataset"]
        mode = meta["alignment"]
        aligned = meta["aligned_dir"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{meta_path}: malformed session file ({exc})") from None
    ds = dio.load_dataset(dataset)
    aligned_dir = path if aligned == "." else Path(aligned)
    src = _FrameSource(ds, aligned_dir, mode)
    for name in ("graph.txt", "keyframes.txt", "frames.txt", "trajectory.txt", "features.npz"):
        if not (path / name).is_file():
            raise InputError(f"missing file: {path / name}")
    try:
        graph = loads_graph((path / "graph.txt").read_text())
    except GraphError as exc:
        raise InputError(f"{path / 'graph.txt'}: {exc}") from None
    kfs = [int(v) for v in (path / "keyframes.txt").read_text().split()]
    frame_kf = [int(line.split()[1]) for line in (path / "frames.txt").read_text().splitlines() if line.strip()]
    traj = dio.read_trajectory(path / "trajectory.txt")
    if len(traj) != len(ds) or len(frame_kf) != len(ds):
        raise InputError(f"{path}: trajectory and frame counts do not match its dataset")
    feats = _load_features(path / "features.npz")
    if sorted(feats) != sorted(kfs) or set(kfs) != set(graph.nodes):
        raise InputError(f"{path}: keyframes, features and graph disagree")
    return _Session(path, ds, src, graph, kfs, feats, traj, frame_kf)


@dataclass
class MergeSummary:
    sessions: int
    cross_edges: list[int]
    final_cost: float


@_input_guard
def merge(inputs, output, cfg: PipelineConfig = PipelineConfig()) -> MergeSummary:
    """Merge mapped sessions through cross-session loop closures."""
    if not inputs:
        raise InputError("merge needs at least one session")
    sessions = [_load_session(Path(p), cfg) for p in inputs]
    loop_kfs = []
    for s in sessions:
        loop_kfs.append(
            {
                k: LoopKeyframe(k, s.features[k], s.src.depth(k), s.src.k, s.src.lift_scale)
                for k in s.keyframes
            }
        )
    first_docs = [descriptor_matrix(sessions[0].features[k]) for k in sessions[0].keyframes]
    if not sum(len(d) for d in first_docs):
        if len(sessions) > 1:
            raise MergeFailure("session 1 has no features to build a vocabulary from")
        vocab = None
    else:
        vocab = build_vocabulary(first_docs, cfg.loop.vocabulary_size, cfg.loop.vocabulary_seed)

    db = BowDatabase()
    sigs = []
    for si, s in enumerate(sessions):
        sigs.append({k: bow_signature(s.features[k], vocab) if vocab else {} for k in s.keyframes})
    for j, k in enumerate(sessions[0].keyframes):
        db.add((0, k), 0, j, sigs[0][k])

    cross: list[Edge] = []
    per_session = [0]
    for si in range(1, len(sessions)):
        found = 0
        for j, k in enumerate(sessions[si].keyframes):
            cands = query(db, sigs[si][k], cfg.graph.merge_top_k, 0, si, j, 0, cfg.loop.min_similarity)
            pairs = [(loop_kfs[key[0]][key[1]], loop_kfs[si][k]) for key, _ in cands]
            # only the best-ranked candidate that verifies becomes an edge
            for (key, _), res in zip(cands, _verify_candidates(pairs, cfg)):
                if res is None:
                    continue
                info = loop_information(res.inliers, res.icp_rmse, cfg.loop.min_inliers, cfg.graph)
                cross.append(Edge(key, (si, k), res.relative, info, "loop"))
                found += 1
                break
        per_session.append(found)
        if not found:
            raise MergeFailure(f"session {si + 1} ({sessions[si].path}) has no loop closure to the sessions before it")
        for j, k in enumerate(sessions[si].keyframes):
            db.add((si, k), si, j, sigs[si][k])

    try:
        merged = merge_sessions(
            [s.graph for s in sessions],
            cross,
            {
                "max_iterations": cfg.graph.max_iterations,
                "lambda_init": cfg.graph.lambda_init,
                "relative_tolerance": cfg.graph.relative_tolerance,
            },
        )
    except MergeError as exc:
        raise MergeFailure(f"session {exc.session + 1} ({sessions[exc.session].path}) cannot be merged") from None
    except GraphError as exc:
        anchor = (0, sessions[0].graph.anchor)
        loose = sorted({n[0] + 1 for c in merged_components(sessions, cross) if anchor not in c for n in c})
        where = ", ".join(f"session {s}" for s in loose) or "a session"
        raise MergeFailure(f"{where} not connected to the merged map ({exc})") from None

    with dio.staged_output(output) as stage:
        for si, s in enumerate(sessions):
            # session depth-camera frame poses move rigidly with their keyframe
            traj = []
            for i, (t, pose) in enumerate(s.trajectory):
                kf = s.frame_kf[i]
                old_kf = s.src.to_depth_camera(s.graph.pose(kf))
                new_kf = s.src.to_depth_camera(merged.pose((si, kf)))
                traj.append((t, new_kf @ old_kf.inverse() @ pose))
            dio.write_trajectory(stage / f"trajectory_{si + 1}.txt", traj)
        ids = {n: n[0] * SESSION_STRIDE + n[1] for n in merged.nodes}
        dio.atomic_write_text(stage / "graph.txt", dumps_graph(merged, ids))
        report = {
            "sessions": [str(s.path.resolve()) for s in sessions],
            "cross_edges": per_session,
            "initial_cost": merged.last_report.initial_cost,
            "final_cost": merged.last_report.final_cost,
            "iterations": merged.last_report.iterations,
        }
        dio.atomic_write_text(stage / "merge.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        dio.atomic_write_text(stage / "config.json", dumps_config(cfg))
    return MergeSummary(len(sessions), per_session, merged.last_report.final_cost)


def merged_components(sessions, cross) -> list[set]:
    g = PoseGraph()
    for si, s in enumerate(sessions):
        for n in s.graph.nodes:
            g.add_node((si, n), Pose.identity(), si)
        for e in s.graph.edges:
            g.add_edge(Edge((si, e.from_id), (si, e.to_id), e.relative, e.information, e.kind))
    for e in cross:
        g.add_edge(e)
    return g.components()


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


@dataclass
class FuseSummary:
    segments: int
    vertices: int
    triangles: int
    cloud_points: int


@_input_guard
def fuse(input_dir, trajectory, output_mesh, cfg: PipelineConfig = PipelineConfig(), keyframes=None) -> FuseSummary:
    """Segmented TSDF fusion of a dataset along a trajectory.

    Writes the mesh to ``output_mesh`` and surface samples of it to
    ``<stem>_cloud.ply`` next to it.
    """
    ds = dio.load_dataset(input_dir)
    traj = dio.read_trajectory(trajectory)
    if len(traj) != len(ds):
        raise InputError(f"{trajectory}: {len(traj)} poses for {len(ds)} frames")
    for i, ((t, _), ts) in enumerate(zip(traj, ds.timestamps)):
        if abs(t - ts) > cfg.evaluation.association_window:
            raise InputError(f"{trajectory}: timestamp of pose {i} does not match frame {i}")
    fcfg: FuseConfig = cfg.fuse
    if fcfg.frames == "keyframes" or keyframes is not None:
        if keyframes is None:
            raise InputError("fusing keyframes only needs a keyframes file")
        try:
            views = sorted({int(v) for v in Path(keyframes).read_text().split()})
        except (OSError, ValueError) as exc:
            raise InputError(f"{keyframes}: cannot read keyframe indices ({exc})") from None
        if any(not 0 <= v < len(ds) for v in views):
            raise InputError(f"{keyframes}: keyframe index out of range")
    else:
        views = list(range(len(ds)))

    if cfg.align.mode == "c2d":
        k = ds.k_depth
        frames = dict(zip(views, parallel_map(ds.depth, views)))
        poses = {v: traj[v][1] for v in views}
    else:
        k = ds.k_color
        frames = dict(zip(views, parallel_map(lambda i: d2c_depth(ds, i), views)))
        poses = {v: traj[v][1] @ ds.rig.color_to_depth for v in views}

    cloud = build_view_cloud(frames, poses, k, fcfg.surface.cloud_stride)
    if len(cloud) == 0:
        raise InputError(f"{input_dir}: no valid depth to fuse")
    segments = kmeans_partition(cloud, fcfg.surface.point_budget, fcfg.surface.seed)
    mesh = fuse_segments(segments, frames, poses, k, fcfg.surface)
    samples = sample_mesh(mesh, fcfg.cloud_density, fcfg.cloud_seed)
    out = Path(output_mesh)
    dio.write_ply(out, mesh.vertices, mesh.normals, mesh.triangles)
    dio.write_ply(cloud_path(out), samples)
    return FuseSummary(len(segments), len(mesh.vertices), len(mesh.triangles), len(samples))


def cloud_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.stem + "_cloud.ply")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_points(path, cfg: PipelineConfig) -> np.ndarray:
    d = dio.read_ply(path)
    if "triangles" in d and len(d["triangles"]):
        from .surface import Mesh

        return sample_mesh(Mesh(d["vertices"], d["triangles"]), cfg.fuse.cloud_density, cfg.fuse.cloud_seed)
    return d["vertices"]


@_input_guard
def evaluate(recon, gt, traj_est=(), traj_gt=(), cfg: PipelineConfig = PipelineConfig()) -> dict:
    """Metrics dict: overlap (percent) and inlier RMSE (mm) per threshold, ATE (m), RPE (deg/s, m/s).

    When trajectories are given the reconstruction is first moved into the
    ground-truth frame by the rigid alignment of the trajectories.
    """
    ecfg: EvalConfig = cfg.evaluation
    traj_est = list(traj_est or ())
    traj_gt = list(traj_gt or ())
    if len(traj_est) != len(traj_gt):
        raise InputError("give one ground-truth trajectory per estimated trajectory")
    r = _load_points(recon, cfg)
    g = _load_points(gt, cfg)
    if len(r) == 0 or len(g) == 0:
        raise InputError("reconstruction and ground truth must be non-empty")
    metrics_ate = metrics_rot = metrics_trans = None
    if traj_est:
        sessions = [(dio.read_trajectory(e), dio.read_trajectory(t)) for e, t in zip(traj_est, traj_gt)]
        for (est, ref), path in zip(sessions, traj_est):
            if len(est) != len(ref):
                raise InputError(f"{path}: {len(est)} poses but the ground truth has {len(ref)}")
        try:
            T = align_sessions(sessions, ecfg.association_window)
            metrics_ate = ate_sessions(sessions, ecfg.association_window)
            rp = rpe_sessions(sessions, ecfg.rpe_delta, ecfg.association_window)
        except (ValueError, DegenerateInputError) as exc:
            raise InputError(f"trajectory evaluation failed: {exc}") from None
        metrics_rot, metrics_trans = rp.rot_rms, rp.trans_rms
        r = T.apply(r)
    res = overlap_rmse(r, g, ecfg.recon)
    out = res.metrics()
    out.update({"ate": metrics_ate, "rpe_rot": metrics_rot, "rpe_trans": metrics_trans})
    return out
