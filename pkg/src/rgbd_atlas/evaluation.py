"""Reconstruction metrics (overlap and inlier RMSE) and trajectory metrics (ATE, RPE)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, Pose, umeyama_align

ASSOCIATION_WINDOW = 0.020


@dataclass(frozen=True)
class ReconEvalConfig:
    voxel: float = 0.01
    gammas: tuple[float, ...] = (0.010, 0.020, 0.050)

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if self.voxel <= 0:
            raise ValueError("voxel must be positive")
        if not self.gammas or any(g <= 0 for g in self.gammas):
            raise ValueError("gammas must be non-empty and positive")
        if any(b <= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ValueError("gammas must be strictly ascending")


@dataclass(frozen=True)
class ReconEvalResult:
    gammas: tuple[float, ...]
    overlap: tuple[float, ...]  # percent of downsampled gt points
    rmse: tuple[float, ...]  # metres, over inliers
    n_recon: int = 0
    n_gt: int = 0

    def metrics(self) -> dict:
        """Flat dict keyed by threshold in mm; overlap in percent, rmse in mm."""
        out = {}
        for g, o, r in zip(self.gammas, self.overlap, self.rmse):
            key = f"{g * 1000:.0f}"
            out[f"overlap_{key}"] = o
            out[f"rmse_{key}"] = r * 1000.0
        return out


def voxel_downsample_centroid(cloud: PointCloud | np.ndarray, voxel: float) -> PointCloud:
    """One point per occupied voxel at the mean of its members.

    Voxel index is ``floor(coord / voxel)``. Members of a voxel are summed in
    lexicographic coordinate order, so the result does not depend on input
    order. Output voxels are in lexicographic index order.
    """
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(pts / voxel).astype(np.int64)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = pts[order]
    new = np.ones(len(pts), dtype=bool)
    new[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    group = np.cumsum(new) - 1
    starts = np.flatnonzero(new)
    rank = np.arange(len(pts)) - starts[group]
    counts = np.bincount(group)
    acc = np.zeros((len(starts), 3))
    # sequential summation within each voxel, vectorised across voxels
    for r in range(int(counts.max())):
        sel = rank == r
        acc[group[sel]] += pts[sel]
    return PointCloud(acc / counts[:, None])


def nearest_distances(query: np.ndarray, ref: np.ndarray, k: int = 4) -> np.ndarray:
    """Distance from each query point to its nearest ``ref`` point.

    The spatial index proposes candidates; distances are recomputed
    directly so the result is bit-identical to an exhaustive search.
    """
    k = min(k, len(ref))
    _, idx = cKDTree(ref).query(query, k=k)
    idx = np.asarray(idx).reshape(len(query), k)
    diff = query[:, None, :] - ref[idx]
    return np.sqrt((diff**2).sum(-1)).min(axis=1)


def overlap_rmse(
    recon: PointCloud | np.ndarray, gt: PointCloud | np.ndarray, cfg: ReconEvalConfig = ReconEvalConfig()
) -> ReconEvalResult:
    """Overlap (inliers over ground-truth count, percent) and inlier RMSE per threshold.

    Distances run from reconstruction to ground truth while overlap is
    normalised by the ground-truth count, so incomplete coverage caps the
    achievable overlap below 100.
    """
    r = voxel_downsample_centroid(recon, cfg.voxel).points
    g = voxel_downsample_centroid(gt, cfg.voxel).points
    if len(r) == 0 or len(g) == 0:
        raise ValueError("reconstruction and ground truth must be non-empty")
    d = nearest_distances(r, g)
    overlap, rmse = [], []
    for gamma in cfg.gammas:
        inl = d[d < gamma]
        overlap.append(100.0 * len(inl) / len(g))
        rmse.append(float(np.sqrt(np.mean(inl**2))) if len(inl) else 0.0)
    return ReconEvalResult(cfg.gammas, tuple(overlap), tuple(rmse), len(r), len(g))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

Trajectory = list  # of (timestamp seconds, Pose)


def associate(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> list[tuple[int, int]]:
    """Pairs ``(i_est, i_gt)`` matched by nearest timestamp within ``window``.

    Each ground-truth entry is used at most once; candidates are taken in
    order of increasing time difference.
    """
    if not est or not gt:
        return []
    te = np.array([t for t, _ in est])
    tg = np.array([t for t, _ in gt])
    order = np.argsort(tg, kind="stable")
    tgs = tg[order]
    pos = np.searchsorted(tgs, te)
    cands = []
    for i, p in enumerate(pos):
        for j in (p - 1, p):
            if 0 <= j < len(tgs):
                dt = abs(te[i] - tgs[j])
                if dt <= window:
                    cands.append((dt, i, int(order[j])))
    cands.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


def _matched(est, gt, window):
    pairs = associate(est, gt, window)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} timestamp matches; need at least 3")
    return pairs


def _positions(sessions, window):
    pe, pg = [], []
    for est, gt in sessions:
        pairs = associate(est, gt, window)
        pe += [est[i][1].t for i, _ in pairs]
        pg += [gt[j][1].t for _, j in pairs]
    if len(pe) < 3:
        raise ValueError(f"only {len(pe)} timestamp matches; need at least 3")
    return np.array(pe), np.array(pg)


def _frame_points(sessions, window):
    """Each matched pose as its origin plus the tips of its unit axes."""
    pe, pg = [], []
    for est, gt in sessions:
        for i, j in associate(est, gt, window):
            for pose, out in ((est[i][1], pe), (gt[j][1], pg)):
                out.append(pose.t)
                out.extend(pose.t + pose.rotation.T)
    if len(pe) < 12:
        raise ValueError(f"only {len(pe) // 4} timestamp matches; need at least 3")
    return np.array(pe), np.array(pg)


def align_trajectories(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> Pose:
    """Rigid transform taking estimated poses onto ground truth."""
    return align_sessions([(est, gt)], window)


def align_sessions(sessions, window: float = ASSOCIATION_WINDOW) -> Pose:
    """One rigid alignment over several ``(est, gt)`` trajectory pairs.

    Orientations take part through the unit axis tips, so straight or planar
    paths still fix the rotation. ATE keeps the position-only alignment.
    """
    pe, pg = _frame_points(sessions, window)
    return umeyama_align(pe, pg)


def ate(est: Trajectory, gt: Trajectory, window: float = ASSOCIATION_WINDOW) -> float:
    """RMS translation error after rigid alignment of ``est`` onto ``gt``."""
    return ate_sessions([(est, gt)], window)


def ate_sessions(sessions, window: float = ASSOCIATION_WINDOW) -> float:
    """ATE of several sessions that share one map frame, under a single alignment.

    Each session is associated by timestamp separately, so sessions may
    reuse time ranges.
    """
    pe, pg = _positions(sessions, window)
    T = umeyama_align(pe, pg)
    err = T.apply(pe) - pg
    return float(np.sqrt(np.mean((err**2).sum(axis=1))))


@dataclass(frozen=True)
class RpeResult:
    rot_rms: float  # deg/s
    trans_rms: float  # m/s
    rot_mean: float
    trans_mean: float
    pairs: int = 0


def _rpe_errors(est, gt, delta, window):
    pairs = _matched(est, gt, window)
    tg = np.array([gt[j][0] for _, j in pairs], dtype=float)
    rot, trans = [], []
    for a, (ia, ja) in enumerate(pairs):
        target = tg[a] + delta
        b = int(np.argmin(np.abs(tg - target)))
        if abs(tg[b] - target) > window or b == a:
            continue
        ib, jb = pairs[b]
        dt = tg[b] - tg[a]
        est_rel = est[ia][1].inverse() @ est[ib][1]
        gt_rel = gt[ja][1].inverse() @ gt[jb][1]
        E = gt_rel.inverse() @ est_rel
        rot.append(math.degrees(E.angle()) / dt)
        trans.append(float(np.linalg.norm(E.t)) / dt)
    return rot, trans


def rpe_sessions(sessions, delta: float = 1.0, window: float = ASSOCIATION_WINDOW) -> RpeResult:
    """RPE with pose pairs taken ``delta`` seconds apart within each session.

    Rotation error is in degrees per second and translation error in metres
    per second. Both the RMS (canonical) and the mean are reported.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    rot, trans = [], []
    for est, gt in sessions:
        r, t = _rpe_errors(est, gt, delta, window)
        rot += r
        trans += t
    if not rot:
        raise ValueError(f"no pose pairs {delta} s apart")
    rot = np.array(rot)
    trans = np.array(trans)
    return RpeResult(
        float(np.sqrt(np.mean(rot**2))),
        float(np.sqrt(np.mean(trans**2))),
        float(rot.mean()),
        float(trans.mean()),
        len(rot),
    )


def rpe_full(
    est: Trajectory, gt: Trajectory, delta: float = 1.0, window: float = ASSOCIATION_WINDOW
) -> RpeResult:
    return rpe_sessions([(est, gt)], delta, window)


def rpe(est: Trajectory, gt: Trajectory, delta: float = 1.0, window: float = ASSOCIATION_WINDOW) -> tuple[float, float]:
    """RMS drift per second: ``(rotation deg/s, translation m/s)``."""
    r = rpe_full(est, gt, delta, window)
    return r.rot_rms, r.trans_rms
