import math

import numpy as np
import pytest

from rgbd_atlas import synthetic as S
from rgbd_atlas.geometry import DepthImage, PointCloud, Pose, se3_exp, unproject_with_normals
from rgbd_atlas.odometry import (
    IcpConfig,
    IcpFailure,
    LocalMap,
    OdometryConfig,
    gauss_newton_step,
    huber_cost,
    icp_point_to_plane,
    point_to_plane_jacobian,
    point_to_plane_residuals,
    register_frame,
    run_session,
)

K = S.default_depth_intrinsics()


def corner_view(seed=0):
    rng = np.random.default_rng(seed)
    cam = S.look_pose(
        rng.uniform(-0.3, 0.3, 3) + [0.6, -0.6, 0.2],
        np.array([-0.5, 0.5, 1.0]) + rng.normal(scale=0.1, size=3),
        up=(0, -1, 0),
    )
    return unproject_with_normals(S.render_depth(S.corner_scene(), cam, K), K, 2)


def plane_sphere_cloud():
    scene = S.Scene([S.Plane([0, 0, 3], [0, 0, -1], None), S.Sphere([0.3, 0.2, 2.0], 0.4)])
    k = S.CameraIntrinsics(40, 40, 24.5, 24.5, 50, 50)
    return unproject_with_normals(S.render_depth(scene, Pose.identity(), k), k, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(fitness_min=0)
    with pytest.raises(ValueError):
        IcpConfig(huber_delta=-1)
    with pytest.raises(ValueError):
        OdometryConfig(map_capacity=0)


def test_self_registration():
    c = plane_sphere_cloud()
    assert len(c) > 2000
    P, fit, rmse = icp_point_to_plane(c, c, Pose.identity())
    assert np.linalg.norm(se3_exp(np.zeros(6)).t - P.t) < 1e-6 and P.angle() < 1e-6
    assert fit == 1.0 and rmse < 1e-9


def test_corner_recovery():
    tgt = corner_view()
    T = se3_exp(np.r_[0, math.radians(5), 0, 0.05, 0, 0])
    P, fit, _ = icp_point_to_plane(tgt.transformed(T), tgt, Pose.identity())
    E = P @ T
    assert np.linalg.norm(E.t) < 1e-3 and math.degrees(E.angle()) < 0.1
    assert fit > 0.99


def test_far_source_fails():
    tgt = corner_view()
    src = PointCloud(tgt.points + [5.0, 0, 0], tgt.normals)
    with pytest.raises(IcpFailure):
        icp_point_to_plane(src, tgt, Pose.identity())


def test_normal_gate_drops_opposed_pairs():
    pts = np.array([[x, y, 1.0] for x in range(4) for y in range(4)], float) * [0.01, 0.01, 1]
    tgt = PointCloud(pts, np.tile([0, 0, -1.0], (16, 1)))
    src = PointCloud(pts, np.tile([0, 0, 1.0], (16, 1)))
    with pytest.raises(IcpFailure):
        icp_point_to_plane(src, tgt, Pose.identity())
    P, _, _ = icp_point_to_plane(src, tgt, Pose.identity(), IcpConfig(normal_max_angle_deg=180))
    assert P.angle() < 1e-9


def test_jacobian_finite_difference():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.normal(size=(1, 3))
        n = rng.normal(size=(1, 3))
        n /= np.linalg.norm(n)
        t = rng.normal(size=(1, 3))
        pose = se3_exp(rng.normal(size=6) * 0.5)
        src = pose.inverse().apply(p)
        J = point_to_plane_jacobian(p, n)[0]
        h = 1e-6
        num = np.array(
            [
                (
                    point_to_plane_residuals(se3_exp(h * e) @ pose, src, t, n)
                    - point_to_plane_residuals(se3_exp(-h * e) @ pose, src, t, n)
                )[0]
                / (2 * h)
                for e in np.eye(6)
            ]
        )
        assert np.linalg.norm(J - num) <= 1e-5 * max(1.0, np.linalg.norm(J))


def test_objective_non_increasing():
    tgt = corner_view(3)
    T = se3_exp(np.r_[0.02, -0.03, 0.01, 0.03, -0.02, 0.04])
    src = tgt.transformed(T)
    from rgbd_atlas.odometry import _Target

    target = _Target(tgt)
    pose = Pose.identity()
    cfg = IcpConfig()
    for _ in range(10):
        ok, idx = target.match(pose.apply(src.points), cfg.correspondence_max_dist)
        s, t, n = src.points[ok], target.points[idx[ok]], target.normals[idx[ok]]
        before = huber_cost(point_to_plane_residuals(pose, s, t, n), cfg.huber_delta)
        pose = se3_exp(gauss_newton_step(pose, s, t, n, cfg.huber_delta)) @ pose
        after = huber_cost(point_to_plane_residuals(pose, s, t, n), cfg.huber_delta)
        assert after <= before + 1e-12


def test_equivariance():
    tgt = corner_view(4)
    src = tgt.transformed(se3_exp(np.r_[0.03, 0, -0.02, 0.02, 0.01, 0]))
    init = Pose.identity()
    P1, _, _ = icp_point_to_plane(src, tgt, init)
    T = se3_exp(np.r_[0.1, -0.2, 0.05, 0.3, 0.1, -0.2])
    P2, _, _ = icp_point_to_plane(src.transformed(T), tgt, init @ T.inverse())
    dt, dr = (P2 @ T).distance_to(P1)
    assert dt < 1e-6 and dr < 1e-6


def test_bootstrap_and_single_frame():
    d = S.render_depth(S.corner_scene(), S.look_pose([0, 0, 0], [-0.3, 0.4, 1], up=(0, -1, 0)), K)
    res = run_session([d], K)
    assert len(res) == 1
    r, m = res[0]
    assert r.status == "ok" and m == 0 and r.pose.angle() == 0 and not r.pose.t.any()
    with pytest.raises(ValueError):
        run_session([], K)


def test_lost_frame_keeps_last_pose():
    scene = S.corner_scene()
    cam = S.look_pose([0, 0, 0], [-0.3, 0.4, 1], up=(0, -1, 0))
    m = LocalMap(20)
    m.insert(0, Pose.identity(), unproject_with_normals(S.render_depth(scene, cam, K), K, 2))
    far = S.render_depth(scene, cam, K)
    far_pts = np.where(far.data > 0, far.data + 5000, 0)
    prev = se3_exp(np.r_[0, 0, 0, 0.01, 0, 0])
    r = register_frame(m, DepthImage(far_pts), K, prev)
    assert r.status == "lost"
    assert r.pose is prev


def test_local_map_fifo():
    m = LocalMap(2)
    for i in range(3):
        m.insert(i, Pose(t=[i, 0, 0]), PointCloud([[0, 0, 1.0]], [[0, 0, -1.0]]))
    assert len(m) == 2
    assert np.allclose(m.cloud.points, [[1, 0, 1], [2, 0, 1]])


def test_corridor_per_frame_drift():
    scene = S.corridor_scene(0)
    traj = S.make_trajectory("corridor_loop", 645)[:100]  # about 0.02 m per frame
    res = run_session([S.render_depth(scene, p, K) for _, p in traj], K)
    assert {m for _, m in res} == {0}
    errs = []
    for i in range(1, len(traj)):
        est = res[i - 1][0].pose.inverse() @ res[i][0].pose
        ref = traj[i - 1][1].inverse() @ traj[i][1]
        errs.append(np.linalg.norm((ref.inverse() @ est).t))
        # continuity: never more than twice the commanded motion
        assert np.linalg.norm(est.t) < 2 * np.linalg.norm(ref.t)
    assert max(errs) < 0.005


def test_teleport_gap_single_break():
    # bounded walls: after a 5 m jump the view no longer overlaps the map
    traj = S.make_trajectory(
        "teleport_gap",
        16,
        {"start": (0, 0, 0), "direction": (1, 0, 0), "facing": (-0.3, 0.4, 1), "jump": 5.0, "gap_at": 7},
    )
    res = run_session([S.render_depth(S.corner_scene(), p, K) for _, p in traj], K)
    assert [m for _, m in res] == [0] * 8 + [1] * 8
    assert res[8][0].status == "lost"
    assert max(res[8][0].pose.distance_to(res[7][0].pose)) < 1e-12


def test_empty_target_is_icp_failure():
    src = PointCloud(np.random.default_rng(0).normal(size=(50, 3)), np.tile([0, 0, 1.0], (50, 1)))
    with pytest.raises(IcpFailure):
        icp_point_to_plane(src, PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), Pose.identity())
