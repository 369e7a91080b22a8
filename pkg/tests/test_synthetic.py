import math

import numpy as np
import pytest

from rgbd_atlas import synthetic as S
from rgbd_atlas.geometry import CameraIntrinsics, Pose, depth_to_points

K = S.default_depth_intrinsics()
# odd-sized camera whose principal point is a pixel centre
KC = CameraIntrinsics(50, 50, 20, 20, 41, 41)


def test_fronto_plane():
    d = S.render_depth(S.Scene([S.Plane([0, 0, 2], [0, 0, -1])]), Pose.identity(), K)
    assert (d.data == 2000).all()


def test_sphere_on_axis():
    d = S.render_depth(S.Scene([S.Sphere([0, 0, 2], 0.5)]), Pose.identity(), KC)
    assert d.data[20, 20] == 1500
    assert d.data[0, 0] == 0


def test_tilted_plane_closed_form():
    n = np.array([math.sin(math.pi / 4), 0, -math.cos(math.pi / 4)])
    p0 = np.array([0, 0, 2.0])
    d = S.render_depth(S.Scene([S.Plane(p0, n)]), Pose.identity(), K).data.astype(float)
    u = (np.arange(K.width) - K.cx) / K.fx
    v = (np.arange(K.height) - K.cy) / K.fy
    uu, vv = np.meshgrid(u, v)
    denom = uu * n[0] + vv * n[1] + n[2]
    z = (p0 @ n) / denom
    ok = (z > 0) & (z < 65.5)
    assert np.abs(d[ok] - z[ok] * 1000).max() <= 0.5 + 1e-6
    assert (d[~ok] == 0).all()


def test_depth_is_surface():
    scene = S.corridor_scene(0)
    pose = S.look_pose([2.3, -1.6, 1.3], [0.2, 1, 0.1])
    d = S.render_depth(scene, pose, K)
    P = pose.apply(depth_to_points(d, K)[d.data > 0])
    assert np.abs(scene.signed_distance(P)).max() < 0.002


def test_sample_counts_and_distance():
    plane = S.Plane([0, 0, 1], [0, 0, 1], (1.0, 1.0))
    c = S.sample_scene_cloud(S.Scene([plane]), 100)
    assert len(c) == 100
    sph = S.Sphere([0.1, 0.2, 0.3], 0.5)
    c = S.sample_scene_cloud(S.Scene([sph]), 100)
    assert len(c) == round(4 * math.pi * 0.25 * 100)
    box = S.Box([0, 0, 0], [1, 0.5, 2])
    for prim in (plane, sph, box):
        pts = S.sample_scene_cloud(S.Scene([prim]), 400, seed=3).points
        assert np.abs(prim.signed_distance(pts)).max() < 1e-9
    a = S.sample_scene_cloud(S.corridor_scene(), 50, seed=1).points
    b = S.sample_scene_cloud(S.corridor_scene(), 50, seed=1).points
    assert np.array_equal(a, b)


def test_noise_reproducible_and_dropout_rate():
    scene = S.Scene([S.Plane([0, 0, 2], [0, 0, -1])])
    k = K.scaled(2)
    noise = S.NoiseModel(seed=11)
    a = S.render_depth(scene, Pose.identity(), k, noise, 5).data
    b = S.render_depth(scene, Pose.identity(), k, noise, 5).data
    assert np.array_equal(a, b)
    assert a.size >= 10**5
    assert abs((a == 0).mean() - noise.dropout_rate) < 0.005
    c = S.render_depth(scene, Pose.identity(), k, noise, 6).data
    assert not np.array_equal(a, c)
    rel = a[a > 0] / 2000.0 - 1
    assert abs(rel.std() - 0.01) < 0.001


def test_color_is_view_independent():
    scene = S.corridor_scene(3)
    rng = np.random.default_rng(0)
    view_b = S.look_pose([-2.3, 1.6, 1.3], [0.1, -1, 0.05])
    zb = S.render_depth_meters(scene, view_b, KC)
    cb = S.render_color(scene, view_b, KC).data
    checked = 0
    for _ in range(20):
        r, c = rng.integers(2, 39, 2)
        if not np.isfinite(zb[r, c]):
            continue
        x = view_b.apply(np.array([[(c - KC.cx) / KC.fx * zb[r, c], (r - KC.cy) / KC.fy * zb[r, c], zb[r, c]]]))[0]
        # another camera whose principal ray passes through the same point
        eye = x + np.array([0.3, -0.2, 0.1]) + 0.5 * (view_b.t - x) / np.linalg.norm(view_b.t - x)
        view_a = S.look_pose(eye, x - eye)
        za = S.render_depth_meters(scene, view_a, KC)[20, 20]
        if abs(za - np.linalg.norm(x - eye)) > 1e-9:
            continue  # occluded from the second viewpoint
        assert np.array_equal(S.render_color(scene, view_a, KC).data[20, 20], cb[r, c])
        checked += 1
    assert checked >= 10


def test_miss_is_black_and_invalid():
    scene = S.Scene([S.Sphere([0, 0, 5], 0.2)])
    d = S.render_depth(scene, Pose.identity(), KC)
    c = S.render_color(scene, Pose.identity(), KC)
    assert (c.data[d.data == 0] == 0).all()
    far = S.render_depth(S.Scene([S.Plane([0, 0, 70], [0, 0, -1])]), Pose.identity(), KC)
    assert (far.data == 0).all()


def test_trajectories():
    orbit = S.make_trajectory("orbit", 4, {"radius": 2.0})
    for i, (t, p) in enumerate(orbit):
        assert abs(t - i / 30) < 1e-12
        s = math.pi / 2 * i
        assert np.allclose(p.t, [2 * math.cos(s), 2 * math.sin(s), 0], atol=1e-12)
        assert np.allclose(p.rotation[:, 2], -p.t / 2, atol=1e-12)
    loop = S.make_trajectory("corridor_loop", 300)
    assert np.linalg.norm(loop[0][1].t - loop[-1][1].t) < 0.01
    gap = S.make_trajectory("teleport_gap", 20, {"jump": 1.5, "step": 0.02})
    steps = [np.linalg.norm(b.t - a.t) for (_, a), (_, b) in zip(gap, gap[1:])]
    assert sum(s > 1.5 for s in steps) == 1


def test_validation():
    with pytest.raises(ValueError):
        S.Scene([])
    with pytest.raises(ValueError):
        S.Sphere([0, 0, 0], 0)
    with pytest.raises(ValueError):
        S.Box([0, 0, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        S.NoiseModel(dropout_rate=1.0)
    with pytest.raises(ValueError):
        S.make_trajectory("orbit", 1)
    with pytest.raises(ValueError):
        S.make_trajectory("spiral", 5)
    with pytest.raises(ValueError):
        S.sample_scene_cloud(S.corner_scene(), 0)
