"""Pipeline configuration: one JSON document with a section per module.

Every knob has a default; a config file only needs the keys it changes.
Unknown keys and invalid values are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import ReconEvalConfig
from .loop_closure import LoopConfig
from .odometry import IcpConfig, OdometryConfig
from .surface import SurfaceConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AlignConfig:
    mode: str = "c2d"  # "c2d" or the "d2c" ablation
    inpaint_iterations: int = 100

    def __post_init__(self):
        if self.mode not in ("c2d", "d2c"):
            raise ValueError("mode must be 'c2d' or 'd2c'")
        if self.inpaint_iterations < 0:
            raise ValueError("inpaint_iterations must be non-negative")


@dataclass(frozen=True)
class GraphConfig:
    max_iterations: int = 50
    lambda_init: float = 0.0
    relative_tolerance: float = 1e-9
    # odometry edges: rotation weight, and translation weight rmse**-2 with rmse floored here
    rotation_information: float = 1e4
    min_rmse: float = 0.002
    # cap on the number of cross-session candidates verified per keyframe
    merge_top_k: int = 5
    lost_fraction_max: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.lambda_init < 0 or self.relative_tolerance < 0:
            raise ValueError("lambda_init and relative_tolerance must be non-negative")
        if self.rotation_information <= 0 or self.min_rmse <= 0:
            raise ValueError("rotation_information and min_rmse must be positive")
        if self.merge_top_k < 1:
            raise ValueError("merge_top_k must be at least 1")
        if not 0 < self.lost_fraction_max <= 1:
            raise ValueError("lost_fraction_max must lie in (0, 1]")


@dataclass(frozen=True)
class FuseConfig:
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    frames: str = "all"  # or "keyframes"
    cloud_density: float = 40000.0  # mesh samples per square metre for the fused cloud
    cloud_seed: int = 0

    def __post_init__(self):
        if self.frames not in ("all", "keyframes"):
            raise ValueError("frames must be 'all' or 'keyframes'")
        if self.cloud_density <= 0:
            raise ValueError("cloud_density must be positive")


@dataclass(frozen=True)
class EvalConfig:
    recon: ReconEvalConfig = field(default_factory=ReconEvalConfig)
    rpe_delta: float = 1.0
    association_window: float = 0.020

    def __post_init__(self):
        if self.rpe_delta <= 0 or self.association_window <= 0:
            raise ValueError("rpe_delta and association_window must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    align: AlignConfig = field(default_factory=AlignConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path + '.' if path else ''}{f.name}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def dumps_config(cfg: PipelineConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(data)


__all__ = [
    "AlignConfig", "ConfigError", "EvalConfig", "FuseConfig", "GraphConfig", "IcpConfig",
    "PipelineConfig", "config_from_dict", "config_to_dict", "dumps_config", "load_config",
]
