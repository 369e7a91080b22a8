"""Colour-to-depth alignment and infrared tone mapping.

The colour image is warped into the raw depth camera at twice the depth
resolution so that the wide depth field of view is kept untouched. The
depth map is densified first so every output pixel has a depth to warp with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, DepthImage, RigExtrinsics, pixel_rays, project

# projected coordinates are snapped to this grid so that dyadic positions
# (e.g. exact half pixels) survive the round trip through floating point
_COORD_QUANTUM = 2.0**-20


@dataclass(frozen=True, eq=False)
class ColorImage:
    """8-bit RGB raster, shape ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError("colour data must have shape (H, W, 3)")
        if data.dtype != np.uint8:
            data = np.clip(np.floor(data + 0.5), 0, 255).astype(np.uint8)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def gray(self) -> np.ndarray:
        """Luma in ``[0, 1]``."""
        rgb = self.data.astype(float) / 255.0
        return rgb @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class AlignedColor:
    """Colour warped into the depth frame.

    ``valid_mask`` marks pixels that carry colour (reprojected or inpainted);
    ``source_mask`` is the reprojection-only mask kept for feature masking.
    """

    image: ColorImage
    valid_mask: np.ndarray
    source_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.valid_mask.shape != self.image.data.shape[:2]:
            raise ValueError("mask dimensions must equal image dimensions")
        if self.source_mask is None:
            object.__setattr__(self, "source_mask", self.valid_mask.copy())


def inpaint_depth_linear(d: DepthImage) -> DepthImage:
    """Fill every invalid pixel by averaged row/column linear interpolation.

    Rows and columns without any valid sample contribute nothing; pixels with
    no valid sample on either line take the globally nearest valid value.
    """
    data = d.data
    valid = data > 0
    if not valid.any():
        raise ValueError("cannot inpaint a depth image without valid pixels")
    if valid.all():
        return DepthImage(data.copy())
    z = data.astype(float)
    H, W = z.shape

    horiz = np.full((H, W), np.nan)
    cols = np.arange(W, dtype=float)
    for r in range(H):
        m = valid[r]
        if m.any():
            horiz[r] = np.interp(cols, cols[m], z[r, m])
    vert = np.full((H, W), np.nan)
    rows = np.arange(H, dtype=float)
    for c in range(W):
        m = valid[:, c]
        if m.any():
            vert[:, c] = np.interp(rows, rows[m], z[m, c])

    fill = np.where(
        np.isnan(horiz), vert, np.where(np.isnan(vert), horiz, 0.5 * (horiz + vert))
    )
    orphan = np.isnan(fill)
    if orphan.any():
        _, (ir, ic) = ndimage.distance_transform_edt(~valid, return_indices=True)
        fill[orphan] = z[ir[orphan], ic[orphan]]
    out = np.where(valid, z, np.floor(fill + 0.5))
    return DepthImage(np.clip(out, 1, 65535).astype(np.uint16))


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup with edge clamping. ``img`` is ``(H, W)`` or ``(H, W, C)``."""
    H, W = img.shape[:2]
    u = np.clip(u, 0.0, W - 1.0)
    v = np.clip(v, 0.0, H - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.intp), W - 2 if W > 1 else 0)
    v0 = np.minimum(np.floor(v).astype(np.intp), H - 2 if H > 1 else 0)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = u - u0
    b = v - v0
    if img.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    f = img.astype(float)
    top = f[v0, u0] * (1 - a) + f[v0, u1] * a
    bot = f[v1, u0] * (1 - a) + f[v1, u1] * a
    return top * (1 - b) + bot * b


def _snap(x: np.ndarray) -> np.ndarray:
    return np.round(x / _COORD_QUANTUM) * _COORD_QUANTUM


def align_color_to_depth(
    c: ColorImage,
    d_dense: DepthImage,
    k_depth: CameraIntrinsics,
    k_color: CameraIntrinsics,
    rig: RigExtrinsics,
) -> AlignedColor:
    """Inverse-warp colour into the depth frame at doubled resolution."""
    if d_dense.width != k_depth.width or d_dense.height != k_depth.height:
        raise ValueError("dense depth does not match depth intrinsics")
    if c.width != k_color.width or c.height != k_color.height:
        raise ValueError("colour image does not match colour intrinsics")
    if (d_dense.data == 0).any():
        raise ValueError("align_color_to_depth requires a fully dense depth map")

    k_out = k_depth.scaled(2)
    xn, yn = pixel_rays(k_out)
    Uo = np.arange(k_out.width, dtype=float) / 2.0
    Vo = np.arange(k_out.height, dtype=float) / 2.0
    uu, vv = np.meshgrid(Uo, Vo)
    z = _bilinear(d_dense.meters(), uu, vv)

    rays = np.empty(z.shape + (3,))
    rays[..., 0] = xn[None, :]
    rays[..., 1] = yn[:, None]
    rays[..., 2] = 1.0
    depth_to_color = rig.color_to_depth.inverse()
    R = depth_to_color.rotation
    # p_c / z = R @ ray + t / z keeps the identity rig exact
    pc = rays @ R.T + depth_to_color.t / z[..., None]
    u, v, w = project(pc, k_color)
    u = _snap(u)
    v = _snap(v)
    valid = (
        (w > 0)
        & (u >= -0.5)
        & (u <= k_color.width - 0.5)
        & (v >= -0.5)
        & (v <= k_color.height - 0.5)
    )
    out = np.zeros(z.shape + (3,))
    out[valid] = _bilinear(c.data, u[valid], v[valid])
    img = ColorImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))
    return AlignedColor(img, valid, valid.copy())


def inpaint_color_holes(a: AlignedColor, max_iterations: int = 100) -> AlignedColor:
    """Fill invalid pixels bordering valid ones by repeated neighbour averaging.

    Each iteration sets every invalid pixel with at least one valid
    8-neighbour to the mean of those neighbours, then marks it valid.
    Only the current fill front is visited.
    """
    valid = a.valid_mask.copy()
    if valid.all() or not valid.any():
        return AlignedColor(a.image, valid, a.source_mask.copy())
    H, W = valid.shape
    Wp = W + 2
    # padded flat buffers; the border stays invalid forever
    ok = np.zeros((H + 2) * Wp, dtype=bool)
    ok.reshape(H + 2, Wp)[1:-1, 1:-1] = valid
    img = np.zeros(((H + 2) * Wp, 3))
    img.reshape(H + 2, Wp, 3)[1:-1, 1:-1] = a.image.data
    inside = np.zeros_like(ok)
    inside.reshape(H + 2, Wp)[1:-1, 1:-1] = True
    offsets = np.array([-Wp - 1, -Wp, -Wp + 1, -1, 1, Wp - 1, Wp, Wp + 1])

    def front_of(seeds):
        nb = (seeds[:, None] + offsets[None, :]).ravel()
        nb = np.unique(nb)
        return nb[inside[nb] & ~ok[nb]]

    front = front_of(np.flatnonzero(ok))
    for _ in range(max_iterations):
        if len(front) == 0:
            break
        nb = front[:, None] + offsets[None, :]
        w = ok[nb]
        counts = w.sum(axis=1)
        sums = np.zeros((len(front), 3))
        for j in range(len(offsets)):
            sums += img[nb[:, j]] * w[:, j, None]
        img[front] = sums / counts[:, None]
        ok[front] = True
        front = front_of(front)
    filled = ok.reshape(H + 2, Wp)[1:-1, 1:-1].copy()
    vals = img.reshape(H + 2, Wp, 3)[1:-1, 1:-1]
    out = np.where(a.valid_mask[..., None], a.image.data, np.clip(np.floor(vals + 0.5), 0, 255))
    return AlignedColor(ColorImage(out.astype(np.uint8)), filled, a.source_mask.copy())


def align_depth_to_color(
    d: DepthImage,
    k_depth: CameraIntrinsics,
    k_color: CameraIntrinsics,
    rig: RigExtrinsics,
) -> DepthImage:
    """Conventional depth-to-colour warp, kept for the alignment ablation.

    Depth points are splatted into the colour camera with a z-buffer; the
    sampling gaps caused by the resolution ratio are closed by a bounded
    nearest-foreground fill. Everything outside the depth field of view stays
    invalid, and depth outside the colour field of view is lost.
    """
    from .geometry import depth_to_points

    P = depth_to_points(d, k_depth)[d.data > 0]
    pc = rig.color_to_depth.inverse().apply(P)
    u, v, z = project(pc, k_color)
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    ok = (z > 0) & (ui >= 0) & (ui < k_color.width) & (vi >= 0) & (vi < k_color.height)
    zmm = np.floor(z[ok] * 1000.0 + 0.5)
    flat = vi[ok] * k_color.width + ui[ok]
    buf = np.full(k_color.width * k_color.height, np.inf)
    np.minimum.at(buf, flat, zmm)
    buf = buf.reshape(k_color.height, k_color.width)

    ratio = max(k_color.fx / k_depth.fx, k_color.fy / k_depth.fy)
    for _ in range(int(np.ceil(ratio))):
        empty = ~np.isfinite(buf)
        if not empty.any():
            break
        nearest = ndimage.minimum_filter(buf, size=3, mode="constant", cval=np.inf)
        buf = np.where(empty, nearest, buf)
    out = np.where(np.isfinite(buf), buf, 0)
    return DepthImage(np.clip(out, 0, 65535).astype(np.uint16))


def ir_tone_map(ir: np.ndarray) -> np.ndarray:
    """Brighten a raw 16-bit infrared frame with ``0.04 * I**0.6``."""
    I = np.asarray(ir, dtype=np.float64)
    out = np.rint(0.04 * np.power(I, 0.6))
    return np.clip(out, 0, 255).astype(np.uint8)
