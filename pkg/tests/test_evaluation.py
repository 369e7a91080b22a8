import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbd_atlas.evaluation import (
    ReconEvalConfig,
    align_trajectories,
    associate,
    ate,
    overlap_rmse,
    rpe,
    rpe_full,
    voxel_downsample_centroid,
)
from rgbd_atlas.geometry import PointCloud, Pose, se3_exp


def grouping_oracle(pts, voxel):
    """Hash-by-floor grouping; members summed in sorted coordinate order."""
    groups = {}
    for p in pts:
        key = tuple(int(math.floor(c / voxel)) for c in p)
        groups.setdefault(key, []).append(tuple(p))
    out = []
    for key in sorted(groups):
        members = sorted(groups[key])
        acc = [0.0, 0.0, 0.0]
        for m in members:
            acc = [a + c for a, c in zip(acc, m)]
        out.append([a / len(members) for a in acc])
    return np.array(out)


def brute_overlap(recon, gt, cfg):
    r = grouping_oracle(recon, cfg.voxel)
    g = grouping_oracle(gt, cfg.voxel)
    d = np.array([np.sqrt(((p - g) ** 2).sum(-1)).min() for p in r])
    res = []
    for gamma in cfg.gammas:
        inl = d[d < gamma]
        res.append((100.0 * len(inl) / len(g), float(np.sqrt(np.mean(inl**2))) if len(inl) else 0.0))
    return res


def walk(n=90, rate=30.0):
    """Turning walk sampled at ``rate`` Hz."""
    out = []
    for i in range(n):
        t = i / rate
        q = se3_exp([0, 0, 0.3 * t, 0, 0, 0]).q
        out.append((t, Pose(q, [0.2 * t, 0.5 * t, 0.1 * math.sin(t)])))
    return out


# --- downsampling ----------------------------------------------------------------------


def test_downsample_two_points():
    out = voxel_downsample_centroid(np.array([[0.001, 0, 0], [0.003, 0, 0]]), 0.01).points
    assert np.allclose(out, [[0.002, 0, 0]], atol=1e-15)


def test_downsample_grid_unchanged():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.01 + 0.005] * 3, indexing="ij"), -1).reshape(-1, 3)
    out = voxel_downsample_centroid(g, 0.01).points
    assert len(out) == len(g)


def test_downsample_matches_oracle():
    rng = np.random.default_rng(0)
    pts = rng.random((1000, 3)) * 0.05
    assert np.array_equal(voxel_downsample_centroid(pts, 0.01).points, grouping_oracle(pts, 0.01))


def test_downsample_permutation_invariant():
    rng = np.random.default_rng(1)
    pts = rng.random((5000, 3)) * 0.04 - 0.02
    a = voxel_downsample_centroid(pts, 0.01).points
    b = voxel_downsample_centroid(pts[rng.permutation(len(pts))], 0.01).points
    assert np.array_equal(a, b)
    # compensated-summation reference
    keys = np.floor(pts / 0.01).astype(int)
    ref = []
    for k in sorted(set(map(tuple, keys))):
        m = pts[np.all(keys == k, axis=1)]
        ref.append([math.fsum(m[:, i]) / len(m) for i in range(3)])
    assert np.abs(a - np.array(ref)).max() < 1e-12


def test_downsample_rejects_bad_voxel():
    with pytest.raises(ValueError):
        voxel_downsample_centroid(np.zeros((1, 3)), 0)


# --- overlap and rmse ---------------------------------------------------------------------


def plane_cloud(z=0.002, n=60, spacing=0.004):
    x, y = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    return np.c_[x.ravel(), y.ravel(), np.full(x.size, z)]


def test_identity_overlap():
    gt = plane_cloud()
    res = overlap_rmse(gt, gt)
    assert res.overlap == (100.0, 100.0, 100.0) and res.rmse == (0.0, 0.0, 0.0)


def test_constant_offset():
    gt = plane_cloud()
    res = overlap_rmse(gt + [0, 0, 0.005], gt)
    assert res.overlap[0] == 100.0
    assert abs(res.rmse[0] - 0.005) < 1e-9


def test_twenty_points_brute_force():
    rng = np.random.default_rng(3)
    gt = rng.random((20, 3)) * 0.1
    recon = gt + rng.normal(scale=0.01, size=gt.shape)
    cfg = ReconEvalConfig()
    res = overlap_rmse(recon, gt, cfg)
    assert list(zip(res.overlap, res.rmse)) == brute_overlap(recon, gt, cfg)


clouds = st.integers(1, 500).flatmap(
    lambda n: st.tuples(st.integers(0, 2**32 - 1), st.just(n), st.integers(1, 500))
)


@settings(max_examples=40, deadline=None)
@given(clouds)
def test_overlap_matches_brute_force(args):
    seed, n, m = args
    rng = np.random.default_rng(seed)
    gt = rng.random((m, 3)) * 0.2
    recon = rng.random((n, 3)) * 0.2
    cfg = ReconEvalConfig()
    res = overlap_rmse(recon, gt, cfg)
    assert list(zip(res.overlap, res.rmse)) == brute_overlap(recon, gt, cfg)
    assert all(a <= b for a, b in zip(res.overlap, res.overlap[1:]))
    assert all(r <= g for r, g in zip(res.rmse, res.gammas))


def test_overlap_errors_and_metrics():
    with pytest.raises(ValueError):
        overlap_rmse(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ReconEvalConfig(gammas=(0.02, 0.01))
    m = overlap_rmse(PointCloud(plane_cloud() + [0, 0, 0.005]), plane_cloud()).metrics()
    assert set(m) == {"overlap_10", "rmse_10", "overlap_20", "rmse_20", "overlap_50", "rmse_50"}
    assert abs(m["rmse_10"] - 5.0) < 1e-6


# --- trajectories --------------------------------------------------------------------------


def test_trajectory_identity():
    gt = walk()
    assert ate(gt, gt) < 1e-12
    r, t = rpe(gt, gt)
    assert r < 1e-9 and t < 1e-12


def test_ate_gauge_invariance():
    gt = walk()
    T = se3_exp([0.4, -0.2, 0.9, 3.0, -1.0, 2.0])
    assert ate([(s, T @ p) for s, p in gt], gt) < 1e-9
    rng = np.random.default_rng(4)
    est = [(s, Pose(p.q, p.t + rng.normal(scale=0.01, size=3))) for s, p in gt]
    base = ate(est, gt)
    assert abs(ate([(s, T @ p) for s, p in est], gt) - base) < 1e-9
    assert abs(ate(est, [(s, T @ p) for s, p in gt]) - base) < 1e-9


def test_rpe_constant_drift():
    gt = walk(150)
    est = [(s, Pose(p.q, p.t + [0.01 * s, 0, 0])) for s, p in gt]
    r, t = rpe(est, gt, 1.0)
    assert abs(t - 0.01) < 1e-9 and r < 1e-9
    full = rpe_full(est, gt, 1.0)
    assert full.pairs == 150 - 30 and abs(full.trans_mean - 0.01) < 1e-9


def test_association_window():
    gt = walk(10, rate=10.0)
    est = [(s + 0.01, p) for s, p in gt]
    assert associate(est, gt) == [(i, i) for i in range(10)]
    late = [(s + 0.05, p) for s, p in gt]
    assert associate(late, gt) == []
    with pytest.raises(ValueError):
        ate(late, gt)
    with pytest.raises(ValueError):
        ate(gt[:2], gt[:2])


def test_alignment_fixed_on_straight_path():
    # a straight path leaves position-only alignment free to roll about it
    gt = [(i / 30, Pose(se3_exp([0.1, 0.2, 0.3, 0, 0, 0]).q, [0.05 * i, 1e-9 * i * i, 0])) for i in range(20)]
    assert align_trajectories(gt, gt).distance_to(Pose.identity())[1] < 1e-12
    T = se3_exp([0.4, -0.2, 0.9, 3.0, -1.0, 2.0])
    dt, dr = align_trajectories([(s, T @ p) for s, p in gt], gt).distance_to(T.inverse())
    assert dt < 1e-9 and dr < 1e-9
