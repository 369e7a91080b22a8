"""Point-to-plane ICP and scan-to-map odometry over raw depth."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._parallel import worker_count
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PointCloud,
    Pose,
    se3_exp,
    unproject_with_normals,
)

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6


class IcpFailure(RuntimeError):
    """Too few correspondences to constrain the six pose parameters."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 30
    correspondence_max_dist: float = 0.10
    convergence_eps: float = 1e-6
    fitness_min: float = 0.3
    huber_delta: float = 0.05
    # pairs whose normals differ by more than this are rejected (needs source normals)
    normal_max_angle_deg: float = 60.0

    def __post_init__(self):
        for name in ("max_iterations", "correspondence_max_dist", "convergence_eps", "huber_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.normal_max_angle_deg <= 180:
            raise ValueError("normal_max_angle_deg must lie in (0, 180]")
        if not 0 < self.fitness_min <= 1:
            raise ValueError("fitness_min must lie in (0, 1]")


@dataclass(frozen=True)
class OdometryConfig:
    icp: IcpConfig = field(default_factory=IcpConfig)
    source_stride: int = 2
    map_stride: int = 2
    keyframe_translation: float = 0.2
    keyframe_rotation_deg: float = 15.0
    map_capacity: int = 20

    def __post_init__(self):
        if self.source_stride < 1 or self.map_stride < 1:
            raise ValueError("strides must be positive integers")
        if self.keyframe_translation <= 0 or self.keyframe_rotation_deg <= 0:
            raise ValueError("keyframe thresholds must be positive")
        if self.map_capacity < 1:
            raise ValueError("map_capacity must be at least 1")


@dataclass
class OdometryResult:
    pose: Pose
    fitness: float
    rmse: float
    status: str  # "ok" | "lost"


def point_to_plane_jacobian(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Rows ``d r_i / d xi`` for a left increment, ``xi = [omega; v]``.

    ``points`` are source points already in the target frame.
    """
    return np.hstack([np.cross(points, normals), normals])


def point_to_plane_residuals(pose: Pose, src: np.ndarray, tgt: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", pose.apply(src) - tgt, normals)


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))))


def gauss_newton_step(pose, src, tgt, normals, delta) -> np.ndarray:
    """One IRLS Gauss-Newton increment at fixed correspondences."""
    p = pose.apply(src)
    r = np.einsum("ij,ij->i", p - tgt, normals)
    w = huber_weights(r, delta)
    J = point_to_plane_jacobian(p, normals)
    H = J.T @ (J * w[:, None])
    g = J.T @ (w * r)
    H[np.diag_indices(6)] += 1e-12 * max(1.0, np.trace(H))
    return -np.linalg.solve(H, g)


class _Target:
    def __init__(self, cloud: PointCloud):
        if cloud.normals is None:
            raise ValueError("ICP target needs normals")
        self.points = cloud.points
        self.normals = cloud.normals
        self.tree = cKDTree(self.points) if len(self.points) else None

    def match(self, p: np.ndarray, max_dist: float):
        if self.tree is None:
            return np.zeros(len(p), dtype=bool), np.zeros(len(p), dtype=np.intp)
        d, idx = self.tree.query(p, distance_upper_bound=max_dist, workers=worker_count())
        ok = np.isfinite(d)
        return ok, np.where(ok, idx, 0)


def icp_point_to_plane(
    source: PointCloud,
    target: PointCloud | _Target,
    init: Pose,
    cfg: IcpConfig = IcpConfig(),
) -> tuple[Pose, float, float]:
    """Register ``source`` onto ``target``; returns ``(pose, fitness, rmse)``.

    ``pose`` maps source coordinates into the target frame. When the source
    carries normals, pairs whose normals disagree beyond
    ``cfg.normal_max_angle_deg`` are dropped. Raises :class:`IcpFailure`
    when fewer than six correspondences are found.
    """
    src = source.points
    if len(src) == 0:
        raise IcpFailure("empty source cloud")
    tgt = target if isinstance(target, _Target) else _Target(target)
    if len(tgt.points) == 0:
        raise IcpFailure("empty target cloud")
    src_n = source.normals if cfg.normal_max_angle_deg < 180 else None
    cos_min = math.cos(math.radians(cfg.normal_max_angle_deg))

    def match(pose):
        ok, idx = tgt.match(pose.apply(src), cfg.correspondence_max_dist)
        if src_n is not None:
            ok &= np.einsum("ij,ij->i", pose.rotate(src_n), tgt.normals[idx]) >= cos_min
        return ok, idx

    pose = init
    for _ in range(cfg.max_iterations):
        ok, idx = match(pose)
        if ok.sum() < MIN_CORRESPONDENCES:
            raise IcpFailure(f"only {int(ok.sum())} correspondences")
        step = gauss_newton_step(
            pose, src[ok], tgt.points[idx[ok]], tgt.normals[idx[ok]], cfg.huber_delta
        )
        pose = se3_exp(step) @ pose
        if np.linalg.norm(step) < cfg.convergence_eps:
            break
    ok, idx = match(pose)
    if ok.sum() < MIN_CORRESPONDENCES:
        raise IcpFailure(f"only {int(ok.sum())} correspondences")
    r = point_to_plane_residuals(pose, src[ok], tgt.points[idx[ok]], tgt.normals[idx[ok]])
    return pose, float(ok.mean()), float(np.sqrt(np.mean(r * r)))


@dataclass
class _Keyframe:
    frame_index: int
    pose: Pose
    cloud: PointCloud  # world frame


class LocalMap:
    """FIFO window of keyframe clouds in the world frame."""

    def __init__(self, capacity: int = 20):
        self.capacity = capacity
        self._keyframes: deque[_Keyframe] = deque()
        self._target: _Target | None = None

    def __len__(self) -> int:
        return len(self._keyframes)

    @property
    def keyframe_poses(self) -> list[Pose]:
        return [kf.pose for kf in self._keyframes]

    @property
    def cloud(self) -> PointCloud:
        return PointCloud.concatenate([kf.cloud for kf in self._keyframes])

    def insert(self, frame_index: int, pose: Pose, local_cloud: PointCloud) -> None:
        self._keyframes.append(_Keyframe(frame_index, pose, local_cloud.transformed(pose)))
        while len(self._keyframes) > self.capacity:
            self._keyframes.popleft()
        self._target = None

    def clear(self) -> None:
        self._keyframes.clear()
        self._target = None

    def target(self) -> _Target:
        if self._target is None:
            self._target = _Target(self.cloud)
        return self._target


class ScanToMapOdometry:
    """Frame-by-frame tracker that restarts a fresh map when tracking is lost."""

    def __init__(self, k: CameraIntrinsics, cfg: OdometryConfig = OdometryConfig()):
        self.k = k
        self.cfg = cfg
        self.map = LocalMap(cfg.map_capacity)
        self.map_id = 0
        self.last_good: Pose | None = None
        self.last_keyframe: Pose | None = None
        # (frame_index, odometry pose, map_id)
        self.keyframes: list[tuple[int, Pose, int]] = []

    def _add_keyframe(self, index: int, depth: DepthImage, pose: Pose) -> None:
        self.map.insert(index, pose, unproject_with_normals(depth, self.k, self.cfg.map_stride))
        self.last_keyframe = pose
        self.keyframes.append((index, pose, self.map_id))

    def _bootstrap(self, index: int, depth: DepthImage, pose: Pose) -> None:
        self.map.clear()
        self._add_keyframe(index, depth, pose)
        self.last_good = pose

    def track(self, index: int, depth: DepthImage) -> tuple[OdometryResult, int]:
        if self.last_good is None:
            self._bootstrap(index, depth, Pose.identity())
            return OdometryResult(Pose.identity(), 1.0, 0.0, "ok"), self.map_id
        result = register_frame(self.map, depth, self.k, self.last_good, self.cfg.icp, self.cfg.source_stride)
        if result.status == "lost":
            self.map_id += 1
            log.info("tracking lost at frame %d; starting map %d", index, self.map_id)
            self._bootstrap(index, depth, self.last_good)
            return result, self.map_id
        self.last_good = result.pose
        dt, dr = self.last_keyframe.distance_to(result.pose)
        if dt > self.cfg.keyframe_translation or math.degrees(dr) > self.cfg.keyframe_rotation_deg:
            self._add_keyframe(index, depth, result.pose)
        return result, self.map_id


def register_frame(
    map: LocalMap,
    frame_depth: DepthImage,
    k: CameraIntrinsics,
    prev_pose: Pose,
    cfg: IcpConfig = IcpConfig(),
    stride: int = 2,
) -> OdometryResult:
    """Track one frame against the local map starting from ``prev_pose``.

    Keyframe insertion is the caller's job (see :class:`ScanToMapOdometry`).
    """
    if len(map) == 0:
        raise ValueError("register_frame needs a non-empty map")
    source = unproject_with_normals(frame_depth, k, stride)
    try:
        pose, fitness, rmse = icp_point_to_plane(source, map.target(), prev_pose, cfg)
    except IcpFailure:
        return OdometryResult(prev_pose, 0.0, float("inf"), "lost")
    if fitness < cfg.fitness_min:
        return OdometryResult(prev_pose, fitness, rmse, "lost")
    return OdometryResult(pose, fitness, rmse, "ok")


def run_session(
    frames, k: CameraIntrinsics, cfg: OdometryConfig = OdometryConfig()
) -> list[tuple[OdometryResult, int]]:
    frames = list(frames)
    if not frames:
        raise ValueError("run_session needs at least one frame")
    tracker = ScanToMapOdometry(k, cfg)
    return [tracker.track(i, d) for i, d in enumerate(frames)]
