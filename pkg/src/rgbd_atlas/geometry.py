"""SE(3) algebra, pinhole camera model and depth-image geometry.

Conventions used across the package:

* Quaternions are stored ``(w, x, y, z)`` with ``w >= 0``.
* A :class:`Pose` maps points from its local frame to the parent frame,
  ``p_parent = R @ p_local + t``.
* Tangent vectors are ordered ``[omega; v]`` (rotation first) and increments
  are applied on the left, ``T <- exp(xi) * T``.
* Depth rasters are millimetres (``uint16``, 0 = invalid); all geometry is
  metres. The conversion happens only in :func:`unproject`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-4


class DegenerateInputError(ValueError):
    """Raised when a solver receives too few or collinear correspondences."""


class DomainError(ValueError):
    """Raised when a logarithm is requested too close to a rotation of pi."""


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------


def hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=float
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * K
        + ((1 - math.cos(theta)) / theta**2) * K @ K
    )


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def so3_log(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    return quat_log(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    w = q[0]
    vec = q[1:]
    s = float(np.linalg.norm(vec))
    theta = 2.0 * math.atan2(s, w)
    if theta >= math.pi - 1e-6:
        raise DomainError(f"rotation angle {theta:.9f} too close to pi for log")
    if s < 1e-12:
        # theta/sin(theta/2) -> 2 as theta -> 0
        return 2.0 * vec / w
    return vec * (theta / s)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + ((1 - math.cos(theta)) / theta**2) * K
        + ((theta - math.sin(theta)) / theta**3) * K @ K
    )


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit quaternion ``(w, x, y, z)`` and translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _canonical(self.q)
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> Pose:
        return cls(matrix_to_quat(R), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def inverse(self) -> Pose:
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(quat_mul(self.q, other.q), self.rotation @ other.t + self.t)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def angle(self) -> float:
        """Rotation angle in radians."""
        s = float(np.linalg.norm(self.q[1:]))
        return 2.0 * math.atan2(s, self.q[0])

    def distance_to(self, other: Pose) -> tuple[float, float]:
        """Translation (m) and rotation (rad) of ``self^-1 * other``."""
        d = self.inverse() @ other
        return float(np.linalg.norm(d.t)), d.angle()

    def __repr__(self) -> str:
        q = ", ".join(f"{x:.6g}" for x in self.q)
        t = ", ".join(f"{x:.6g}" for x in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(p: Pose) -> Pose:
    return p.inverse()


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        q = np.array([1.0, *(0.5 * omega)])
    else:
        q = np.array([math.cos(theta / 2), *(math.sin(theta / 2) / theta * omega)])
    return Pose(q, so3_left_jacobian(omega) @ v)


def se3_log(p: Pose) -> np.ndarray:
    omega = quat_log(p.q)
    v = so3_left_jacobian_inv(omega) @ p.t
    return np.concatenate([omega, v])


def _q_matrix(omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    V = hat(v)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    if theta < 1e-3:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 + t2 / 5040.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta * theta + 2 * c - 2) / (2 * theta**4)
        c3 = (2 * theta - 3 * s + theta * c) / (2 * theta**5)
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (W @ WV + VW @ W - 3 * WVW)
        + c3 * (WVW @ W + W @ WVW)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SE(3) for ``[omega; v]`` ordering."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    Jl = so3_left_jacobian(omega)
    J = np.zeros((6, 6))
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[3:, :3] = _q_matrix(omega, v)
    return J


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    Jr = se3_left_jacobian(-xi)
    Ji = np.linalg.inv(Jr[:3, :3])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ Jr[3:, :3] @ Ji
    return out


def adjoint(p: Pose) -> np.ndarray:
    R = p.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = hat(p.t) @ R
    return A


# ---------------------------------------------------------------------------
# Camera and images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics of the same camera sampled on a grid ``factor`` times denser.

        Pixel ``u`` in the scaled grid sits at ``u / factor`` in the original.
        """
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def subsampled(self, stride: int) -> CameraIntrinsics:
        """Intrinsics for the ``[::stride, ::stride]`` pixel grid."""
        w = (self.width + stride - 1) // stride
        h = (self.height + stride - 1) // stride
        return CameraIntrinsics(
            self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride, w, h
        )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class RigExtrinsics:
    """``color_to_depth`` maps colour-camera coordinates into the depth frame."""

    color_to_depth: Pose = field(default_factory=Pose.identity)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """16-bit depth raster in millimetres, shape ``(height, width)``; 0 = invalid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("depth data must be 2-D")
        if data.dtype != np.uint16:
            data = np.clip(np.round(data), 0, 65535).astype(np.uint16)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def meters(self) -> np.ndarray:
        return self.data.astype(float) / 1000.0

    def subsampled(self, stride: int) -> DepthImage:
        return DepthImage(self.data[::stride, ::stride])


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    view_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length does not match points")
        if self.view_ids is not None:
            self.view_ids = np.asarray(self.view_ids, dtype=np.int64).reshape(-1)
            if len(self.view_ids) != n:
                raise ValueError("view_ids length does not match points")
            if n and self.view_ids.min() < 0:
                raise ValueError("view_ids must be non-negative")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> PointCloud:
        normals = None if self.normals is None else pose.rotate(self.normals)
        return PointCloud(pose.apply(self.points), normals, self.view_ids)

    def select(self, mask) -> PointCloud:
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.view_ids is None else self.view_ids[mask],
        )

    @staticmethod
    def concatenate(clouds: list[PointCloud]) -> PointCloud:
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        vids = None
        if all(c.view_ids is not None for c in clouds):
            vids = np.concatenate([c.view_ids for c in clouds])
        return PointCloud(pts, normals, vids)


def _check_dims(d: DepthImage, k: CameraIntrinsics) -> None:
    if d.width != k.width or d.height != k.height:
        raise ValueError(
            f"depth image is {d.width}x{d.height} but intrinsics expect {k.width}x{k.height}"
        )


def pixel_rays(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Normalized image coordinates ``x = (u - cx)/fx`` and ``y = (v - cy)/fy``."""
    u = np.arange(k.width, dtype=float)
    v = np.arange(k.height, dtype=float)
    return (u - k.cx) / k.fx, (v - k.cy) / k.fy


def depth_to_points(d: DepthImage, k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel 3-D points, shape ``(H, W, 3)``; invalid pixels have ``z = 0``."""
    _check_dims(d, k)
    z = d.meters()
    xn, yn = pixel_rays(k)
    out = np.empty(z.shape + (3,))
    out[..., 0] = z * xn[None, :]
    out[..., 1] = z * yn[:, None]
    out[..., 2] = z
    return out


def unproject(d: DepthImage, k: CameraIntrinsics, stride: int = 4) -> PointCloud:
    """Back-project valid pixels on the ``stride`` grid, row-major order."""
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    pts = depth_to_points(d, k)[::stride, ::stride]
    valid = d.data[::stride, ::stride] > 0
    return PointCloud(pts[valid])


def project(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective projection; returns ``(u, v, z)``."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * points[..., 0] / z + k.cx
        v = k.fy * points[..., 1] / z + k.cy
    return u, v, z


def _smooth(fwd: np.ndarray, bwd: np.ndarray, ratio: float) -> np.ndarray:
    a = np.linalg.norm(fwd, axis=-1)
    b = np.linalg.norm(bwd, axis=-1)
    return np.maximum(a, b) <= ratio * np.minimum(a, b)


def estimate_normals(
    d: DepthImage, k: CameraIntrinsics, discontinuity_ratio: float | None = 4.0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel normals from central differences on the pixel grid.

    Returns ``(normals, valid)`` with normals of shape ``(H, W, 3)`` pointing
    toward the camera. Pixels on the border or next to invalid depth are
    marked invalid and their normal is zero. With ``discontinuity_ratio``
    set, pixels whose forward and backward differences disagree in length by
    more than that factor (occlusion edges) are invalid too.
    """
    P = depth_to_points(d, k)
    ok = d.data > 0
    H, W = ok.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, valid
    c = P[1:-1, 1:-1]
    fu, bu = P[1:-1, 2:] - c, c - P[1:-1, :-2]
    fv, bv = P[2:, 1:-1] - c, c - P[:-2, 1:-1]
    tu = fu + bu
    tv = fv + bv
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)
    inner = (
        ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
    ) & (norm > 0)
    if discontinuity_ratio:
        inner &= _smooth(fu, bu, discontinuity_ratio) & _smooth(fv, bv, discontinuity_ratio)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = n / norm[..., None]
    flip = np.einsum("ijk,ijk->ij", n, P[1:-1, 1:-1]) > 0
    n[flip] *= -1
    n[~inner] = 0.0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = inner
    return normals, valid


def unproject_with_normals(d: DepthImage, k: CameraIntrinsics, stride: int = 1) -> PointCloud:
    """Cloud on the ``stride`` grid with normals estimated on that same grid."""
    ds = d.subsampled(stride)
    ks = k.subsampled(stride)
    normals, valid = estimate_normals(ds, ks)
    P = depth_to_points(ds, ks)
    return PointCloud(P[valid], normals[valid])


def umeyama_align(src, dst) -> Pose:
    """Least-squares rigid transform ``T`` with ``dst ~ T(src)`` (no scale)."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have equal length")
    if len(src) < 3:
        raise DegenerateInputError("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateInputError("correspondences are collinear")
    C = xd.T @ xs
    U, S, Vt = np.linalg.svd(C)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateInputError("cross-covariance is rank deficient")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return Pose.from_rt(R, mu_d - R @ mu_s)
