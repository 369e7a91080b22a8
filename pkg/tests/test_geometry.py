import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from rgbd_atlas.geometry import (
    CameraIntrinsics,
    DegenerateInputError,
    DepthImage,
    DomainError,
    PointCloud,
    Pose,
    adjoint,
    depth_to_points,
    estimate_normals,
    project,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_left_jacobian,
    se3_log,
    umeyama_align,
    unproject,
)


def twist_matrix(xi):
    w, v = xi[:3], xi[3:]
    X = np.zeros((4, 4))
    X[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    X[:3, 3] = v
    return X


def random_pose(rng, max_angle=math.pi * 0.9, scale=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()
    return Pose.from_rt(R, rng.uniform(-scale, scale, 3))


def pose_close(a: Pose, b: Pose, tol=1e-9):
    dt, dr = a.distance_to(b)
    return dt < tol and dr < tol


finite = st.floats(-3, 3, allow_nan=False)
vec6 = st.lists(finite, min_size=6, max_size=6).map(np.array)


# --- Pose -------------------------------------------------------------------


def test_quaternion_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_pose(rng)
        xyzw = Rotation.from_matrix(p.rotation).as_quat()
        q = np.array([xyzw[3], *xyzw[:3]])
        q = q if q[0] >= 0 else -q
        assert np.allclose(p.q, q, atol=1e-12)
        assert p.q[0] >= 0
        assert abs(np.linalg.norm(p.q) - 1) < 1e-12


def test_compose_example():
    a = Pose.from_rt(Rotation.from_euler("z", 90, degrees=True).as_matrix(), [1, 0, 0])
    c = se3_compose(a, a)
    expect = a.matrix() @ a.matrix()
    assert np.allclose(c.matrix(), expect, atol=1e-12)
    assert np.allclose(c.t, [1, 1, 0], atol=1e-12)
    assert abs(c.angle() - math.pi) < 1e-12


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = random_pose(rng)
        assert pose_close(Pose.identity() @ p, p)
        assert pose_close(p @ se3_inverse(p), Pose.identity())
        assert abs(np.linalg.norm((p @ p.inverse()).q) - 1) < 1e-9


def test_compose_associative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert pose_close((a @ b) @ c, a @ (b @ c))


def test_apply_matches_matrix():
    rng = np.random.default_rng(3)
    p = random_pose(rng)
    pts = rng.normal(size=(10, 3))
    hom = np.c_[pts, np.ones(10)] @ p.matrix().T
    assert np.allclose(p.apply(pts), hom[:, :3], atol=1e-12)


# --- exp / log --------------------------------------------------------------


def test_exp_zero_and_axis():
    assert pose_close(se3_exp(np.zeros(6)), Pose.identity(), 1e-15)
    p = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    assert np.allclose(p.rotation, Rotation.from_euler("z", 90, degrees=True).as_matrix(), atol=1e-12)
    assert np.allclose(p.t, 0)


@settings(max_examples=200, deadline=None)
@given(vec6)
def test_exp_matches_matrix_exponential(xi):
    assert np.allclose(se3_exp(xi).matrix(), expm(twist_matrix(xi)), atol=1e-9)


def test_exp_log_round_trip_unit_rotation():
    rng = np.random.default_rng(4)
    for _ in range(100):
        w = rng.normal(size=3)
        xi = np.r_[w / np.linalg.norm(w), rng.uniform(-2, 2, 3)]
        assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec6)
def test_exp_log_round_trip(xi):
    if np.linalg.norm(xi[:3]) >= math.pi - 1e-3:
        return
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_log_small_angles():
    for a in (0.0, 1e-12, 1e-8, 1e-5):
        xi = np.array([a, -a, 0.5 * a, 0.1, 0.2, 0.3])
        assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


def test_log_near_pi_raises():
    p = se3_exp([0, 0, math.pi - 1e-8, 0, 0, 0])
    with pytest.raises(DomainError):
        se3_log(p)


def test_left_jacobian_finite_difference():
    rng = np.random.default_rng(5)
    for _ in range(20):
        xi = rng.normal(size=6) * 0.7
        J = se3_left_jacobian(xi)
        h = 1e-6
        num = np.zeros((6, 6))
        base = se3_exp(xi)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            num[:, i] = (se3_log(se3_exp(xi + e) @ base.inverse()) - se3_log(se3_exp(xi - e) @ base.inverse())) / (2 * h)
        assert np.allclose(J, num, atol=1e-6)


def test_adjoint():
    rng = np.random.default_rng(6)
    p = random_pose(rng)
    xi = rng.normal(size=6) * 0.3
    lhs = p @ se3_exp(xi) @ p.inverse()
    assert pose_close(lhs, se3_exp(adjoint(p) @ xi), 1e-9)


# --- camera -----------------------------------------------------------------


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)


def test_unproject_empty_and_principal_point():
    k = CameraIntrinsics(10, 10, 2, 2, 5, 5)
    assert len(unproject(DepthImage(np.zeros((5, 5))), k, 1)) == 0
    d = np.zeros((5, 5), np.uint16)
    d[2, 2] = 1000
    c = unproject(DepthImage(d), k, 1)
    assert np.allclose(c.points, [[0, 0, 1]])


def test_unproject_plane_stride_two():
    k = CameraIntrinsics(2.0, 4.0, 1.5, 1.5, 4, 4)
    c = unproject(DepthImage(np.full((4, 4), 2000)), k, 2)
    expect = [[2 * (u - 1.5) / 2.0, 2 * (v - 1.5) / 4.0, 2.0] for v in (0, 2) for u in (0, 2)]
    assert np.allclose(c.points, expect)


def test_unproject_dimension_mismatch():
    with pytest.raises(ValueError):
        unproject(DepthImage(np.ones((3, 3))), CameraIntrinsics(1, 1, 1, 1, 4, 4))


def test_project_unproject_round_trip():
    rng = np.random.default_rng(7)
    k = CameraIntrinsics(30, 32, 19.5, 14.5, 40, 30)
    d = rng.integers(0, 5000, (30, 40))
    P = depth_to_points(DepthImage(d), k)
    u, v, _ = project(P[d > 0], k)
    vv, uu = np.nonzero(d > 0)
    assert np.abs(u - uu).max() < 0.5 and np.abs(v - vv).max() < 0.5


def test_normals_flat_plane():
    k = CameraIntrinsics(20, 20, 9.5, 9.5, 20, 20)
    n, ok = estimate_normals(DepthImage(np.full((20, 20), 1500)), k)
    assert ok[1:-1, 1:-1].all() and not ok[0].any()
    assert np.allclose(n[ok], [0, 0, -1], atol=1e-12)


def test_normals_tilted_plane():
    # plane through (0,0,2) with normal (sin45, 0, -cos45), 80 degree field of view;
    # millimetre depth steps alone exceed 1 degree on wide-angle near pixels
    k = CameraIntrinsics(48, 48, 39.5, 39.5, 80, 80)
    nrm = np.array([math.sin(math.pi / 4), 0, -math.cos(math.pi / 4)])
    xn = (np.arange(k.width) - k.cx) / k.fx
    yn = (np.arange(k.height) - k.cy) / k.fy
    ray = np.stack(np.broadcast_arrays(xn[None, :], yn[:, None], np.ones((k.height, k.width))), -1)
    z = (nrm @ [0, 0, 2.0]) / (ray @ nrm)
    n, ok = estimate_normals(DepthImage(z * 1000), k)
    ang = np.degrees(np.arccos(np.clip(n[ok] @ nrm, -1, 1)))
    assert ok[1:-1, 1:-1].all()
    assert ang.max() < 1.0


def test_normals_invalid_neighbour():
    k = CameraIntrinsics(20, 20, 9.5, 9.5, 20, 20)
    d = np.full((20, 20), 1500)
    d[10, 10] = 0
    _, ok = estimate_normals(DepthImage(d), k)
    assert not ok[10, 9] and not ok[9, 10] and not ok[10, 11] and not ok[11, 10]
    assert ok[5, 5]


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), normals=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), view_ids=[0, -1])


# --- umeyama ----------------------------------------------------------------


def test_umeyama_identity_and_recovery():
    rng = np.random.default_rng(8)
    src = rng.normal(size=(4, 3))
    assert pose_close(umeyama_align(src, src), Pose.identity(), 1e-9)
    T = Pose.from_rt(Rotation.from_euler("z", 90, degrees=True).as_matrix(), [1, 2, 3])
    assert pose_close(umeyama_align(src, T.apply(src)), T, 1e-9)


def test_umeyama_collinear():
    with pytest.raises(DegenerateInputError):
        umeyama_align([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(DegenerateInputError):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_umeyama_reflection_guard():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(10, 3))
    dst = src * [1, 1, -1]
    assert np.linalg.det(umeyama_align(src, dst).rotation) > 0


def test_umeyama_local_optimality():
    rng = np.random.default_rng(10)
    src = rng.normal(size=(30, 3))
    dst = random_pose(rng).apply(src) + rng.normal(scale=0.05, size=(30, 3))
    T = umeyama_align(src, dst)
    best = np.sum((T.apply(src) - dst) ** 2)
    for _ in range(100):
        P = se3_exp(rng.normal(scale=1e-3, size=6)) @ T
        assert np.sum((P.apply(src) - dst) ** 2) >= best - 1e-12
