"""Analytic scenes, ray-cast RGB-D rendering and scripted trajectories.

This is the ground-truth oracle for the whole pipeline: planes, spheres and
axis-aligned boxes are intersected exactly, surfaces carry a procedural
checker texture, and trajectories are generated in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, PointCloud, Pose, RigExtrinsics, pixel_rays, project
from .imaging import ColorImage

FRAME_RATE = 30.0
CHECKER_PERIOD = 0.25
_EPS = 1e-9


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = normal / np.linalg.norm(normal)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(helper, n)
    a /= np.linalg.norm(a)
    return a, np.cross(n, a)


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane through ``point`` with unit ``normal``; bounded when ``size`` is set.

    ``size`` holds the full extents along the two in-plane basis axes.
    """

    point: np.ndarray
    normal: np.ndarray
    size: tuple[float, float] | None = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        if self.size is not None:
            a, b = _plane_basis(self.normal)
            hit = o + t[:, None] * d
            rel = np.nan_to_num(hit - self.point, posinf=1e9, neginf=-1e9)
            inside = (np.abs(rel @ a) <= self.size[0] / 2) & (np.abs(rel @ b) <= self.size[1] / 2)
            t = np.where(inside, t, np.inf)
        return np.where(t > _EPS, t, np.inf)

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return (p - self.point) @ self.normal

    def area(self) -> float:
        if self.size is None:
            raise ValueError("unbounded plane has no finite area")
        return self.size[0] * self.size[1]

    def sample(self, density: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        a, b = _plane_basis(self.normal)
        pts = _stratified_rect(self.size[0], self.size[1], density, rng)
        p = self.point + pts[:, :1] * a + pts[:, 1:] * b
        return p, np.broadcast_to(self.normal, p.shape).copy()


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * d @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def area(self) -> float:
        return 4 * math.pi * self.radius**2

    def sample(self, density: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n = int(round(self.area() * density))
        if n == 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        # equal-area bands in z, one jittered sample per band, golden-angle azimuth
        i = np.arange(n)
        z = 1.0 - 2.0 * (i + rng.random(n)) / n
        phi = i * math.pi * (3.0 - math.sqrt(5.0)) + rng.random(n) * 2 * math.pi / n
        rxy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        dirs = np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
        return self.center + self.radius * dirs, dirs


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box; seen from inside it behaves like a closed room."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if not np.all(lo < hi):
            raise ValueError("box min must be below max on every axis")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.min - o) * inv
            t2 = (self.max - o) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tn = np.max(np.minimum(t1, t2), axis=1)
        tf = np.min(np.maximum(t1, t2), axis=1)
        hit = (tn <= tf) & (tf > _EPS)
        t = np.where(tn > _EPS, tn, tf)
        return np.where(hit, t, np.inf)

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        c = 0.5 * (self.min + self.max)
        h = 0.5 * (self.max - self.min)
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def faces(self) -> list[tuple[np.ndarray, np.ndarray, tuple[float, float]]]:
        c = 0.5 * (self.min + self.max)
        ext = self.max - self.min
        out = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[axis] = sign
                p = c.copy()
                p[axis] = self.max[axis] if sign > 0 else self.min[axis]
                a, b = _plane_basis(n)
                size = (float(np.abs(a) @ ext), float(np.abs(b) @ ext))
                out.append((p, n, size))
        return out

    def area(self) -> float:
        return sum(s[0] * s[1] for _, _, s in self.faces())

    def sample(self, density: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        pts, nrm = [], []
        for p, n, size in self.faces():
            a, b = _plane_basis(n)
            uv = _stratified_rect(size[0], size[1], density, rng)
            pts.append(p + uv[:, :1] * a + uv[:, 1:] * b)
            nrm.append(np.broadcast_to(n, (len(uv), 3)))
        return np.concatenate(pts), np.concatenate(nrm)


def _stratified_rect(su: float, sv: float, density: float, rng) -> np.ndarray:
    nu = max(1, int(round(su * math.sqrt(density))))
    nv = max(1, int(round(sv * math.sqrt(density))))
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    ju = rng.random(iu.shape)
    jv = rng.random(iv.shape)
    u = ((iu + ju) / nu - 0.5) * su
    v = ((iv + jv) / nv - 0.5) * sv
    return np.stack([u.ravel(), v.ravel()], axis=1)


Primitive = Plane | Sphere | Box


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: list
    texture_seed: int = 0
    checker_period: float = CHECKER_PERIOD

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest positive hit parameter and primitive index per ray."""
        best = np.full(len(dirs), np.inf)
        which = np.full(len(dirs), -1)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origin, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, i, which)
        return best, which

    def texture(self, points: np.ndarray) -> np.ndarray:
        return checker_texture(points, self.texture_seed, self.checker_period)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance to the nearest primitive surface."""
        return np.min([np.abs(p.signed_distance(points)) for p in self.primitives], axis=0)


def _hash3(cells: np.ndarray, seed: int) -> np.ndarray:
    """splitmix64-style hash of integer lattice cells, returns uint64."""
    with np.errstate(over="ignore"):
        h = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(0x632BE59BD9B4E019)
        h = np.full(cells.shape[:-1], h, dtype=np.uint64)
        for axis, mul in enumerate((0xBF58476D1CE4E5B9, 0x94D049BB133111EB, 0xD6E8FEB86659FD93)):
            h = h ^ (cells[..., axis].astype(np.int64).astype(np.uint64) * np.uint64(mul))
            h = h ^ (h >> np.uint64(31))
            h = h * np.uint64(0x9E3779B97F4A7C15)
            h = h ^ (h >> np.uint64(29))
    return h


def checker_texture(points: np.ndarray, seed: int = 0, period: float = CHECKER_PERIOD) -> np.ndarray:
    """Two-tone 3-D checker with per-cell seeded colour jitter, RGB in [0, 255]."""
    points = np.asarray(points, dtype=float)
    offset = 0.0371 + 0.013 * (seed % 7)
    cells = np.floor((points + offset) / period).astype(np.int64)
    parity = cells.sum(axis=-1) & 1
    h = _hash3(cells, seed)
    jitter = np.stack(
        [((h >> np.uint64(8 * c)) & np.uint64(0xFF)).astype(float) for c in range(3)], axis=-1
    )
    base = np.where(parity[..., None] == 1, 175.0, 80.0)
    return np.clip(base + (jitter - 127.5) * 0.55, 0, 255)


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.01
    dropout_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.depth_sigma < 1 and 0 <= self.dropout_rate < 1):
            raise ValueError("noise rates must lie in [0, 1)")


def _camera_rays(pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    xn, yn = pixel_rays(k)
    rays = np.empty((k.height, k.width, 3))
    rays[..., 0] = xn[None, :]
    rays[..., 1] = yn[:, None]
    rays[..., 2] = 1.0
    return pose.rotate(rays.reshape(-1, 3))


def render_depth_meters(scene: Scene, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Exact camera-z of the first hit per pixel; ``inf`` on a miss."""
    t, _ = scene.raycast(pose.t, _camera_rays(pose, k))
    return t.reshape(k.height, k.width)


def render_depth(
    scene: Scene,
    pose: Pose,
    k: CameraIntrinsics,
    noise: NoiseModel | None = None,
    frame_index: int = 0,
) -> DepthImage:
    z = render_depth_meters(scene, pose, k)
    if noise is not None:
        rng = np.random.default_rng([noise.seed, frame_index])
        gauss = rng.standard_normal(z.shape)
        drop = rng.random(z.shape) < noise.dropout_rate
        z = z * (1.0 + noise.depth_sigma * gauss)
        z = np.where(drop, np.inf, z)
    mm = np.floor(z * 1000.0 + 0.5)
    mm = np.where(np.isfinite(mm) & (mm > 0) & (mm <= 65535), mm, 0)
    return DepthImage(mm.astype(np.uint16))


def render_color(scene: Scene, pose: Pose, k: CameraIntrinsics) -> ColorImage:
    rays = _camera_rays(pose, k)
    t, _ = scene.raycast(pose.t, rays)
    hit = np.isfinite(t)
    rgb = np.zeros((len(t), 3))
    rgb[hit] = scene.texture(pose.t + t[hit, None] * rays[hit])
    return ColorImage(np.floor(rgb.reshape(k.height, k.width, 3) + 0.5).astype(np.uint8))


def sample_scene_cloud(scene: Scene, density: float, seed: int = 0) -> PointCloud:
    """Stratified surface samples of every bounded primitive."""
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    pts, nrm = [], []
    for prim in scene.primitives:
        if isinstance(prim, Plane) and prim.size is None:
            continue
        p, n = prim.sample(density, rng)
        pts.append(p)
        nrm.append(n)
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.concatenate(pts), np.concatenate(nrm))


def visible_subset(
    cloud: PointCloud,
    scene: Scene,
    poses: list[Pose],
    k: CameraIntrinsics,
    tolerance: float = 0.01,
) -> PointCloud:
    """Keep points seen unoccluded by at least one camera."""
    seen = np.zeros(len(cloud), dtype=bool)
    for pose in poses:
        zbuf = render_depth_meters(scene, pose, k)
        local = pose.inverse().apply(cloud.points)
        u, v, z = project(local, k)
        ui = np.floor(u + 0.5)
        vi = np.floor(v + 0.5)
        ok = (z > 0) & (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height) & ~seen
        idx = np.nonzero(ok)[0]
        zr = zbuf[vi[idx].astype(int), ui[idx].astype(int)]
        seen[idx[np.abs(zr - z[idx]) < tolerance + 0.01 * z[idx]]] = True
    return cloud.select(seen)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def look_pose(position, forward, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (x right, y down, z forward) at ``position`` facing ``forward``."""
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    y = -np.asarray(up, dtype=float)
    y = y - (y @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return Pose.from_rt(np.stack([x, y, z], axis=1), position)


def make_trajectory(kind: str, n_frames: int, params: dict | None = None) -> list[tuple[float, Pose]]:
    """Scripted depth-camera trajectories sampled at 30 Hz.

    ``corridor_loop``: one lap of an ellipse (``a``, ``b``, ``height``) facing
    along the direction of travel, ending where it started.
    ``orbit``: circle of ``radius`` around ``center`` looking inward.
    ``teleport_gap``: straight walk of ``step`` metres per frame with a single
    jump of ``jump`` metres after frame ``gap_at``.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    params = dict(params or {})
    stamps = [i / FRAME_RATE for i in range(n_frames)]
    poses: list[Pose] = []
    if kind == "corridor_loop":
        a = params.get("a", 2.3)
        b = params.get("b", 1.75)
        h = params.get("height", 1.3)
        bob = params.get("bob", 0.03)
        phase0 = params.get("phase", 0.0)
        laps = params.get("laps", 1.0)
        for i in range(n_frames):
            s = phase0 + 2 * math.pi * laps * i / (n_frames - 1)
            pos = np.array([a * math.cos(s), b * math.sin(s), h + bob * math.sin(3 * s)])
            fwd = np.array([-a * math.sin(s), b * math.cos(s), 0.0])
            fwd /= np.linalg.norm(fwd)
            # slight pitch wobble keeps floor and ceiling in view alternately
            fwd[2] = 0.08 * math.sin(2 * s)
            poses.append(look_pose(pos, fwd))
    elif kind == "orbit":
        r = params.get("radius", 2.0)
        c = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        h = params.get("height", 0.0)
        for i in range(n_frames):
            s = 2 * math.pi * i / n_frames
            pos = c + np.array([r * math.cos(s), r * math.sin(s), h])
            poses.append(look_pose(pos, c - pos))
    elif kind == "teleport_gap":
        step = params.get("step", 0.02)
        jump = params.get("jump", 5.0)
        gap_at = params.get("gap_at", n_frames // 2)
        start = np.asarray(params.get("start", (0.0, 0.0, 1.3)), dtype=float)
        direction = np.asarray(params.get("direction", (1.0, 0.0, 0.0)), dtype=float)
        direction /= np.linalg.norm(direction)
        facing = np.asarray(params.get("facing", direction), dtype=float)
        for i in range(n_frames):
            d = step * i + (jump if i > gap_at else 0.0)
            poses.append(look_pose(start + d * direction, facing))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return list(zip(stamps, poses))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def default_depth_intrinsics() -> CameraIntrinsics:
    """Wide field-of-view depth camera (about 118 x 118 degrees)."""
    return CameraIntrinsics(48.0, 48.0, 79.5, 79.5, 160, 160)


def default_color_intrinsics() -> CameraIntrinsics:
    """Narrow colour camera (about 90 x 59 degrees)."""
    return CameraIntrinsics(128.0, 128.0, 127.5, 71.5, 256, 144)


def default_rig() -> RigExtrinsics:
    from .geometry import se3_exp

    return RigExtrinsics(se3_exp([0.012, -0.004, 0.002, 0.032, -0.002, 0.004]))


def corridor_scene(seed: int = 0) -> Scene:
    """Ring corridor around a central block, with cabinets and hanging spheres."""
    prims: list = [
        Box([-3.2, -2.6, 0.0], [3.2, 2.6, 2.6]),
        Box([-1.4, -0.9, -0.1], [1.4, 0.9, 2.7]),
        Box([-3.2, -0.6, 0.0], [-2.85, 0.5, 1.1]),
        Box([2.8, 0.2, 0.0], [3.2, 1.2, 0.8]),
        Box([-0.4, 2.2, 0.0], [0.6, 2.6, 1.4]),
        Box([0.8, -2.6, 0.0], [1.6, -2.25, 0.9]),
        Box([-2.2, -2.6, 1.2], [-1.5, -2.3, 1.8]),
        Box([1.4, -0.3, 0.0], [1.7, 0.3, 1.6]),
        Sphere([-1.8, 2.2, 1.9], 0.22),
        Sphere([2.4, -2.15, 1.5], 0.25),
        Sphere([-2.75, -1.9, 0.35], 0.3),
        Sphere([2.75, 2.1, 2.0], 0.2),
    ]
    return Scene(prims, texture_seed=seed)


def corner_scene() -> Scene:
    """Three mutually orthogonal walls plus a sphere and a box, viewed from inside."""
    return Scene(
        [
            Plane([0, 0, 3.0], [0, 0, -1], (6.0, 6.0)),
            Plane([-1.5, 0, 1.5], [1, 0, 0], (6.0, 6.0)),
            Plane([0, 1.2, 1.5], [0, -1, 0], (6.0, 6.0)),
            Sphere([0.4, 0.1, 2.2], 0.35),
            Box([-0.9, 0.5, 1.6], [-0.3, 1.2, 2.3]),
        ]
    )
