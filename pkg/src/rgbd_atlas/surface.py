"""Segmented TSDF fusion on a block-hashed voxel grid and mesh extraction.

Voxel ``i`` (integer triple) has its centre at ``i * voxel_size``. Blocks of
``BLOCK`` voxels per side are allocated lazily and looked up by integer block
coordinate, so memory follows the observed surface rather than the scene's
bounding box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from ._parallel import parallel_map
from .cluster import kmeans
from .geometry import CameraIntrinsics, DepthImage, PointCloud, Pose, depth_to_points

BLOCK = 16
# observations are snapped to this grid so running sums are exact (order-invariant)
TSDF_QUANTUM = 2.0**-22


@dataclass(frozen=True)
class SurfaceConfig:
    voxel_size: float = 0.02
    truncation_voxels: float = 4.0
    weight_cap: float = 100.0
    point_budget: int = 500_000
    seed: int = 0
    cloud_stride: int = 4
    allocation_stride: int = 2

    def __post_init__(self):
        if self.voxel_size <= 0 or self.truncation_voxels <= 0 or self.weight_cap <= 0:
            raise ValueError("voxel_size, truncation_voxels and weight_cap must be positive")
        if self.point_budget < 1 or self.cloud_stride < 1 or self.allocation_stride < 1:
            raise ValueError("point_budget and strides must be positive integers")

    @property
    def truncation(self) -> float:
        return self.truncation_voxels * self.voxel_size


class TsdfVolume:
    """Sparse TSDF: a hash map from block coordinate to dense voxel arrays.

    Each voxel stores the weighted sum of its observations and the weight;
    the tsdf is their ratio. Below the weight cap the sum is exact, so
    integrating frames in any order gives bit-identical values.
    """

    def __init__(
        self,
        voxel_size: float = 0.02,
        truncation: float | None = None,
        weight_cap: float = 100.0,
        bounds: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation if truncation is not None else 4 * voxel_size)
        self.weight_cap = float(weight_cap)
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self._slots: dict[tuple[int, int, int], int] = {}
        self._sum = np.zeros((0, BLOCK, BLOCK, BLOCK))
        self._weight = np.zeros((0, BLOCK, BLOCK, BLOCK))

    # -- storage ------------------------------------------------------------

    @property
    def blocks(self) -> dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]]:
        return {k: self.block(k) for k in self._slots}

    def __len__(self) -> int:
        return len(self._slots)

    def block_keys(self) -> list[tuple[int, int, int]]:
        return sorted(self._slots)

    def block(self, key) -> tuple[np.ndarray, np.ndarray] | None:
        s = self._slots.get(tuple(key))
        if s is None:
            return None
        w = self._weight[s]
        return np.divide(self._sum[s], w, out=np.zeros_like(w), where=w > 0), w.copy()

    def allocate(self, keys) -> np.ndarray:
        """Slots for ``keys`` (an ``(n, 3)`` int array), allocating as needed."""
        keys = [tuple(int(v) for v in k) for k in keys]
        new = [k for k in keys if k not in self._slots]
        if new:
            base = len(self._slots)
            for i, k in enumerate(new):
                self._slots[k] = base + i
            need = base + len(new)
            if need > len(self._sum):
                grow = max(need, 2 * len(self._sum), 64) - len(self._sum)
                pad = np.zeros((grow, BLOCK, BLOCK, BLOCK))
                self._sum = np.concatenate([self._sum, pad])
                self._weight = np.concatenate([self._weight, pad])
        return np.array([self._slots[k] for k in keys], dtype=np.int64)

    def _voxel_offsets(self) -> np.ndarray:
        g = np.arange(BLOCK)
        return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)

    def block_voxel_centers(self, keys: np.ndarray) -> np.ndarray:
        idx = np.asarray(keys)[:, None, :] * BLOCK + self._voxel_offsets()[None]
        return idx * self.voxel_size

    def _in_bounds(self, pts: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return np.ones(pts.shape[:-1], dtype=bool)
        lo, hi = self.bounds
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def set_from_sdf(self, sdf_fn, lo, hi, weight: float = 1.0) -> None:
        """Fill every block meeting the box ``[lo, hi]`` from a signed-distance function.

        Only blocks containing a voxel within the truncation band are kept.
        """
        bs = BLOCK * self.voxel_size
        blo = np.floor(np.asarray(lo) / bs).astype(int)
        bhi = np.floor(np.asarray(hi) / bs).astype(int)
        grid = np.stack(
            np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(blo, bhi)], indexing="ij"), axis=-1
        ).reshape(-1, 3)
        centers = self.block_voxel_centers(grid)
        sdf = sdf_fn(centers.reshape(-1, 3)).reshape(len(grid), -1)
        near = np.abs(sdf) < self.truncation
        keep = near.any(axis=1)
        slots = self.allocate(grid[keep])
        t = _quantize(np.clip(sdf[keep] / self.truncation, -1, 1)).reshape(-1, BLOCK, BLOCK, BLOCK)
        self._sum[slots] = t * weight
        self._weight[slots] = weight


def _quantize(t: np.ndarray) -> np.ndarray:
    return np.round(t / TSDF_QUANTUM) * TSDF_QUANTUM


def _touched_blocks(points: np.ndarray, margin: float, block_size: float) -> np.ndarray:
    lo = np.floor((points - margin) / block_size).astype(np.int64)
    hi = np.floor((points + margin) / block_size).astype(np.int64)
    keys = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                k = np.stack(
                    [
                        np.where(dx, hi[:, 0], lo[:, 0]),
                        np.where(dy, hi[:, 1], lo[:, 1]),
                        np.where(dz, hi[:, 2], lo[:, 2]),
                    ],
                    axis=1,
                )
                keys.append(k)
    # margin < block size, so corners of the +/-margin box cover every block touched
    return np.unique(np.concatenate(keys), axis=0)


def tsdf_integrate(
    vol: TsdfVolume, depth: DepthImage, k: CameraIntrinsics, pose: Pose, allocation_stride: int = 1
) -> None:
    """Fuse one depth frame (``pose`` maps camera to world) into ``vol``."""
    valid = depth.data > 0
    if not valid.any():
        return
    P = depth_to_points(depth, k)
    sub = valid[::allocation_stride, ::allocation_stride]
    surf = pose.apply(P[::allocation_stride, ::allocation_stride][sub])
    block_size = BLOCK * vol.voxel_size
    keys = _touched_blocks(surf, vol.truncation, block_size)
    if vol.bounds is not None:
        lo, hi = vol.bounds
        blo = keys * block_size
        bhi = (keys + 1) * block_size - vol.voxel_size
        keys = keys[np.all((bhi >= lo) & (blo <= hi), axis=1)]
    if len(keys) == 0:
        return

    centers = vol.block_voxel_centers(keys)  # (M, 4096, 3)
    cam = pose.inverse().apply(centers.reshape(-1, 3))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(k.fx * cam[:, 0] / z + k.cx + 0.5)
        v = np.floor(k.fy * cam[:, 1] / z + k.cy + 0.5)
    inside = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    d = np.zeros_like(z)
    d[inside] = depth.data[v[inside].astype(np.intp), u[inside].astype(np.intp)] / 1000.0
    sdf = d - z
    upd = inside & (d > 0) & (sdf > -vol.truncation)
    upd &= vol._in_bounds(centers.reshape(-1, 3))
    upd = upd.reshape(len(keys), -1)
    touched = upd.any(axis=1)
    if not touched.any():
        return
    keys = keys[touched]
    upd = upd[touched]
    sdf = sdf.reshape(-1, BLOCK**3)[touched]
    slots = vol.allocate(keys)

    s_old = vol._sum[slots].reshape(len(slots), -1)
    w_old = vol._weight[slots].reshape(len(slots), -1)
    t_new = _quantize(np.clip(np.where(upd, sdf, 0.0) / vol.truncation, -1.0, 1.0))
    w_new = w_old + 1.0
    capped = w_new > vol.weight_cap
    # at the cap the average keeps moving but the weight stays put
    s_cap = (s_old + t_new) / w_new * vol.weight_cap
    s_new = np.where(capped, s_cap, s_old + t_new)
    vol._sum[slots] = np.where(upd, s_new, s_old).reshape(-1, BLOCK, BLOCK, BLOCK)
    vol._weight[slots] = np.where(upd, np.minimum(w_new, vol.weight_cap), w_old).reshape(-1, BLOCK, BLOCK, BLOCK)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def enclosed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(abs(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0))

    def euler_characteristic(self) -> int:
        tri = self.triangles
        edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(tri))
        return n_verts - n_edges + len(tri)


def weld(vertices: np.ndarray, triangles: np.ndarray, normals: np.ndarray, quantum: float):
    """Merge vertices that snap to the same grid cell of size ``quantum``.

    Degenerate triangles (two corners merged) are dropped and vertices that
    end up unused are removed.
    """
    if len(vertices) == 0:
        return Mesh()
    keys = np.floor(vertices / quantum + 0.5).astype(np.int64)
    uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    tri = inv[triangles]
    ok = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    tri = tri[ok]
    nrm = np.zeros((len(uniq), 3))
    np.add.at(nrm, inv, normals)
    verts = vertices[first]
    used = np.unique(tri)
    remap = np.full(len(uniq), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nrm = nrm[used]
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.divide(nrm, ln, out=np.zeros_like(nrm), where=ln > 0)
    mesh = Mesh(verts[used], remap[tri], nrm)
    area = mesh.triangle_areas()
    if (area <= 0).any():
        mesh = Mesh(mesh.vertices, mesh.triangles[area > 0], mesh.normals)
    return mesh


def _padded_block(vol: TsdfVolume, key) -> tuple[np.ndarray, np.ndarray]:
    t = np.zeros((BLOCK + 1,) * 3, dtype=np.float32)
    w = np.zeros((BLOCK + 1,) * 3, dtype=np.float32)
    bx, by, bz = key
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                blk = vol.block((bx + dx, by + dy, bz + dz))
                if blk is None:
                    continue
                sx = slice(0, BLOCK) if dx == 0 else slice(0, 1)
                sy = slice(0, BLOCK) if dy == 0 else slice(0, 1)
                sz = slice(0, BLOCK) if dz == 0 else slice(0, 1)
                ox = slice(0, BLOCK) if dx == 0 else slice(BLOCK, BLOCK + 1)
                oy = slice(0, BLOCK) if dy == 0 else slice(BLOCK, BLOCK + 1)
                oz = slice(0, BLOCK) if dz == 0 else slice(BLOCK, BLOCK + 1)
                t[ox, oy, oz] = blk[0][sx, sy, sz]
                w[ox, oy, oz] = blk[1][sx, sy, sz]
    return t, w


def extract_mesh(vol: TsdfVolume) -> Mesh:
    """Marching cubes over cubes whose eight corners all carry weight.

    Each block is processed with a one-voxel overlap into its positive
    neighbours and the per-block pieces are welded, so the surface has no
    seams at block borders.
    """
    all_v, all_f, all_n = [], [], []
    offset = 0
    for key in vol.block_keys():
        t, w = _padded_block(vol, key)
        obs = w > 0
        cube = (
            obs[:-1, :-1, :-1] & obs[1:, :-1, :-1] & obs[:-1, 1:, :-1] & obs[:-1, :-1, 1:]
            & obs[1:, 1:, :-1] & obs[1:, :-1, 1:] & obs[:-1, 1:, 1:] & obs[1:, 1:, 1:]
        )
        if not cube.any():
            continue
        tt = np.where(obs, t, 0.0)
        sign_change = np.zeros_like(cube)
        lo = np.minimum.reduce([tt[i : i + BLOCK, j : j + BLOCK, k : k + BLOCK] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        hi = np.maximum.reduce([tt[i : i + BLOCK, j : j + BLOCK, k : k + BLOCK] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        sign_change = cube & (lo <= 0) & (hi >= 0) & (lo < hi)
        if not sign_change.any():
            continue
        mask = np.zeros(t.shape, dtype=bool)
        mask[1:, 1:, 1:] = cube
        try:
            verts, faces, normals, _ = marching_cubes(tt, 0.0, mask=mask, gradient_direction="descent")
        except (RuntimeError, ValueError):
            continue
        if len(faces) == 0:
            continue
        verts = verts + np.asarray(key) * BLOCK
        all_v.append(verts)
        all_f.append(faces + offset)
        all_n.append(normals)
        offset += len(verts)
    if not all_v:
        return Mesh()
    V = np.concatenate(all_v)
    F = np.concatenate(all_f)
    N = np.concatenate(all_n)
    mesh = weld(V, F, N, 2.0**-16)
    mesh.vertices = mesh.vertices * vol.voxel_size
    return _orient_normals(mesh)


def _orient_normals(mesh: Mesh) -> Mesh:
    """Point vertex normals along the face winding (toward positive tsdf)."""
    if len(mesh.triangles) == 0:
        return mesh
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)
    acc = np.zeros_like(mesh.vertices)
    for i in range(3):
        np.add.at(acc, mesh.triangles[:, i], fn)
    ln = np.linalg.norm(acc, axis=1, keepdims=True)
    grad = mesh.normals
    acc = np.divide(acc, ln, out=grad.copy(), where=ln > 0)
    mesh.normals = acc
    return mesh


def sample_mesh(mesh: Mesh, density: float, seed: int = 0) -> np.ndarray:
    """About ``density`` points per square metre, uniformly over the surface."""
    if len(mesh.triangles) == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    area = mesh.triangle_areas()
    expected = area * density
    counts = np.floor(expected + rng.random(len(expected))).astype(np.int64)
    tri = np.repeat(np.arange(len(area)), counts)
    r1 = np.sqrt(rng.random(len(tri)))
    r2 = rng.random(len(tri))
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


# ---------------------------------------------------------------------------
# segmentation and segmented fusion
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Segment:
    centroid: np.ndarray
    view_ids: set
    aabb: tuple[np.ndarray, np.ndarray]
    size: int = 0


def kmeans_partition(cloud: PointCloud, point_budget: int = 500_000, seed: int = 0) -> list[Segment]:
    """Split ``cloud`` into ``ceil(N / point_budget)`` k-means segments."""
    if len(cloud) == 0:
        raise ValueError("cannot partition an empty cloud")
    if cloud.view_ids is None:
        raise ValueError("partitioning needs per-point view ids")
    k = max(1, math.ceil(len(cloud) / point_budget))
    centers, labels = kmeans(cloud.points, k, seed=seed)
    segments = []
    for s in range(len(centers)):
        m = labels == s
        if not m.any():
            continue
        pts = cloud.points[m]
        segments.append(
            Segment(
                centers[s].copy(),
                set(int(v) for v in np.unique(cloud.view_ids[m])),
                (pts.min(axis=0), pts.max(axis=0)),
                int(m.sum()),
            )
        )
    return segments


class MissingPoseError(KeyError):
    def __init__(self, view):
        self.view = view
        super().__init__(f"no pose for view {view}")

    def __str__(self):
        return self.args[0]


def build_view_cloud(frames: dict, poses: dict, k: CameraIntrinsics, stride: int) -> PointCloud:
    from .geometry import unproject

    clouds = []
    for vid in sorted(frames):
        if vid not in poses:
            raise MissingPoseError(vid)
        c = unproject(frames[vid], k, stride).transformed(poses[vid])
        c.view_ids = np.full(len(c), vid, dtype=np.int64)
        clouds.append(c)
    return PointCloud.concatenate(clouds)


def segment_bounds(seg: Segment, cfg: SurfaceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Padded box a segment's volume covers: its aabb plus truncation and two voxels."""
    margin = cfg.truncation + 2 * cfg.voxel_size
    return seg.aabb[0] - margin, seg.aabb[1] + margin


def views_reaching(bounds, frames: dict, poses: dict, k: CameraIntrinsics, cfg: SurfaceConfig) -> set:
    """Views whose integration can write a voxel inside ``bounds``.

    A frame updates whole blocks around its own surface points, so any view
    with a depth point within one block diagonal plus the truncation band of
    the box is included.
    """
    reach = cfg.truncation + BLOCK * cfg.voxel_size * math.sqrt(3)
    lo, hi = bounds[0] - reach, bounds[1] + reach
    out = set()
    s = cfg.allocation_stride
    for vid in sorted(frames):
        if vid not in poses:
            continue
        d = frames[vid]
        valid = d.data[::s, ::s] > 0
        if not valid.any():
            continue
        pts = poses[vid].apply(depth_to_points(d, k)[::s, ::s][valid])
        if np.any(np.all((pts >= lo) & (pts <= hi), axis=1)):
            out.add(vid)
    return out


def fuse_segments(
    segments: list[Segment],
    frames: dict,
    poses: dict,
    k: CameraIntrinsics,
    cfg: SurfaceConfig = SurfaceConfig(),
) -> Mesh:
    """Fuse each segment in its own bounded volume and stitch the meshes.

    A segment integrates its own views plus any other view able to write
    into its padded box, so voxels inside the box match a single global
    volume. Each triangle is kept by the nearest segment centroid among the
    segments whose box interior contains it; shared border vertices are then
    merged on a ``voxel_size / 8`` grid.
    """
    for seg in segments:
        for vid in sorted(seg.view_ids):
            if vid not in poses:
                raise MissingPoseError(vid)
            if vid not in frames:
                raise KeyError(f"no depth frame for view {vid}")
    if not segments:
        return Mesh()
    centroids = np.array([s.centroid for s in segments])
    boxes = [segment_bounds(s, cfg) for s in segments]
    # a cube whose centre lies one voxel inside the box has all corners inside it
    inner = [(lo + cfg.voxel_size, hi - cfg.voxel_size) for lo, hi in boxes]

    def fuse_one(si: int) -> Mesh:
        seg = segments[si]
        vol = TsdfVolume(cfg.voxel_size, cfg.truncation, cfg.weight_cap, bounds=boxes[si])
        views = set(seg.view_ids)
        if len(segments) > 1:
            views |= views_reaching(boxes[si], frames, poses, k, cfg)
        for vid in sorted(views):
            tsdf_integrate(vol, frames[vid], k, poses[vid], cfg.allocation_stride)
        mesh = extract_mesh(vol)
        if len(segments) == 1 or not len(mesh):
            return mesh
        tc = mesh.vertices[mesh.triangles].mean(axis=1)
        d = ((tc[:, None, :] - centroids[None]) ** 2).sum(-1)
        for j, (lo, hi) in enumerate(inner):
            d[~np.all((tc >= lo) & (tc <= hi), axis=1), j] = np.inf
        return Mesh(mesh.vertices, mesh.triangles[d.argmin(1) == si], mesh.normals)

    pieces = parallel_map(fuse_one, range(len(segments)))
    return merge_meshes(pieces, cfg.voxel_size / 8)


def merge_meshes(meshes: list[Mesh], snap: float) -> Mesh:
    meshes = [m for m in meshes if len(m)]
    if not meshes:
        return Mesh()
    if len(meshes) == 1:
        m = meshes[0]
        used = np.unique(m.triangles)
        remap = np.full(len(m.vertices), -1)
        remap[used] = np.arange(len(used))
        return Mesh(m.vertices[used], remap[m.triangles], m.normals[used])
    V, F, N = [], [], []
    off = 0
    for m in meshes:
        V.append(m.vertices)
        F.append(m.triangles + off)
        N.append(m.normals)
        off += len(m.vertices)
    return weld(np.concatenate(V), np.concatenate(F), np.concatenate(N), snap)
