"""Simplified SIFT: DoG extrema, dominant orientation, 4x4x8 descriptors.

Differences from the full detector: a fixed three octaves, no 3-D quadratic
refinement of extrema (a per-axis parabola gives the sub-pixel offset), and
no initial image doubling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SIGMA0 = 1.6
ASSUMED_BLUR = 0.5
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
DESC_WIDTH = 4
DESC_BINS = 8
DESC_SCALE = 3.0
DESC_CLIP = 0.2
EDGE_RATIO = 10.0


@dataclass(frozen=True, eq=False)
class Feature:
    """Keypoint in base-image pixels with a unit-norm 128-D descriptor."""

    position: tuple[float, float]
    scale: float
    orientation: float
    descriptor: np.ndarray
    contrast: float = 0.0


@dataclass(frozen=True)
class SiftConfig:
    octaves: int = 3
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    max_features: int = 500

    def __post_init__(self):
        if self.octaves < 1 or self.scales_per_octave < 1 or self.max_features < 1:
            raise ValueError("octaves, scales_per_octave and max_features must be positive")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")


def _pyramid(gray: np.ndarray, cfg: SiftConfig):
    s = cfg.scales_per_octave
    k = 2.0 ** (1.0 / s)
    sigmas = [SIGMA0 * k**i for i in range(s + 3)]
    base = ndimage.gaussian_filter(gray, math.sqrt(SIGMA0**2 - ASSUMED_BLUR**2), mode="nearest")
    gauss, dogs = [], []
    img = base
    for o in range(cfg.octaves):
        layers = [img]
        for i in range(1, s + 3):
            inc = math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
            layers.append(ndimage.gaussian_filter(layers[-1], inc, mode="nearest"))
        stack = np.stack(layers)
        gauss.append(stack)
        dogs.append(stack[1:] - stack[:-1])
        img = stack[s][::2, ::2]
        if min(img.shape) < 8:
            break
    return gauss, dogs, sigmas


def _gradients(layer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.gradient(layer)
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def _extrema(dog: np.ndarray, threshold: float) -> np.ndarray:
    """(layer, row, col) of 3x3x3 extrema in the interior layers."""
    fp = np.ones((3, 3, 3), dtype=bool)
    mx = ndimage.maximum_filter(dog, footprint=fp, mode="nearest")
    mn = ndimage.minimum_filter(dog, footprint=fp, mode="nearest")
    is_ext = ((dog == mx) | (dog == mn)) & (np.abs(dog) >= threshold)
    is_ext[0] = False
    is_ext[-1] = False
    is_ext[:, :1] = is_ext[:, -1:] = False
    is_ext[:, :, :1] = is_ext[:, :, -1:] = False
    return np.argwhere(is_ext)


def _edge_ok(D: np.ndarray, r: int, c: int) -> bool:
    dxx = D[r, c + 1] + D[r, c - 1] - 2 * D[r, c]
    dyy = D[r + 1, c] + D[r - 1, c] - 2 * D[r, c]
    dxy = 0.25 * (D[r + 1, c + 1] - D[r + 1, c - 1] - D[r - 1, c + 1] + D[r - 1, c - 1])
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    return det > 0 and tr * tr * EDGE_RATIO < (EDGE_RATIO + 1) ** 2 * det


def _parabola(m1: float, c0: float, p1: float) -> float:
    den = m1 - 2 * c0 + p1
    if den == 0:
        return 0.0
    return float(np.clip(0.5 * (m1 - p1) / den, -0.5, 0.5))


def _orientations(mag, ang, r, c, sigma) -> list[float]:
    radius = int(round(3 * 1.5 * sigma))
    H, W = mag.shape
    r0, r1 = max(r - radius, 0), min(r + radius + 1, H)
    c0, c1 = max(c - radius, 0), min(c + radius + 1, W)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    w = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * (1.5 * sigma) ** 2))
    a = ang[r0:r1, c0:c1]
    b = np.floor((a % (2 * np.pi)) / (2 * np.pi) * ORI_BINS).astype(int) % ORI_BINS
    hist = np.bincount(b.ravel(), (w * mag[r0:r1, c0:c1]).ravel(), ORI_BINS)
    # circular smoothing
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    for i in range(ORI_BINS):
        left, right = hist[i - 1], hist[(i + 1) % ORI_BINS]
        if hist[i] > left and hist[i] > right and hist[i] >= ORI_PEAK_RATIO * peak:
            off = _parabola(left, hist[i], right)
            out.append(((i + 0.5 + off) / ORI_BINS) * 2 * np.pi)
    return out


def descriptor_radius(sigma: float) -> float:
    """Half-width in octave pixels of the region a descriptor samples."""
    hist_width = DESC_SCALE * sigma
    return hist_width * math.sqrt(2) * (DESC_WIDTH + 1) * 0.5


def _describe(mag, ang, r, c, sigma, theta) -> np.ndarray:
    hist_width = DESC_SCALE * sigma
    radius = int(math.ceil(descriptor_radius(sigma)))
    H, W = mag.shape
    r0, r1 = max(int(r) - radius, 0), min(int(r) + radius + 1, H)
    c0, c1 = max(int(c) - radius, 0), min(int(c) + radius + 1, W)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dy = yy - r
    dx = xx - c
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # coordinates in the keypoint frame, in histogram-cell units
    xr = (cos_t * dx + sin_t * dy) / hist_width
    yr = (-sin_t * dx + cos_t * dy) / hist_width
    xb = xr + DESC_WIDTH / 2 - 0.5
    yb = yr + DESC_WIDTH / 2 - 0.5
    inside = (xb > -1) & (xb < DESC_WIDTH) & (yb > -1) & (yb < DESC_WIDTH)
    w = np.exp(-(xr**2 + yr**2) / (2 * (0.5 * DESC_WIDTH) ** 2))
    m = (mag[r0:r1, c0:c1] * w)[inside]
    o = ((ang[r0:r1, c0:c1] - theta) % (2 * np.pi))[inside] / (2 * np.pi) * DESC_BINS
    xb = xb[inside]
    yb = yb[inside]
    hist = np.zeros((DESC_WIDTH + 2, DESC_WIDTH + 2, DESC_BINS))
    x0 = np.floor(xb).astype(int)
    y0 = np.floor(yb).astype(int)
    o0 = np.floor(o).astype(int)
    fx, fy, fo = xb - x0, yb - y0, o - o0
    for iy, wy in ((0, 1 - fy), (1, fy)):
        for ix, wx in ((0, 1 - fx), (1, fx)):
            for io, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(
                    hist,
                    (y0 + iy + 1, x0 + ix + 1, (o0 + io) % DESC_BINS),
                    m * wy * wx * wo,
                )
    vec = hist[1:-1, 1:-1].ravel()
    n = np.linalg.norm(vec)
    if n == 0:
        return vec
    vec = np.minimum(vec / n, DESC_CLIP)
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else vec


def detect_features(
    gray: np.ndarray, mask: np.ndarray | None = None, cfg: SiftConfig = SiftConfig()
) -> list[Feature]:
    """Detect and describe keypoints in a ``[0, 1]`` grayscale image.

    Keypoints whose descriptor support reaches a masked-out pixel or the
    image border are dropped. The strongest ``cfg.max_features`` by DoG
    contrast are returned.
    """
    gray = np.asarray(gray, dtype=float)
    if mask is None:
        mask = np.ones(gray.shape, dtype=bool)
    # distance (base pixels) from every pixel to the nearest invalid pixel or border
    padded = np.pad(mask, 1, constant_values=False)
    clearance = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]

    gauss, dogs, sigmas = _pyramid(gray, cfg)
    found: list[Feature] = []
    for o, (G, D) in enumerate(zip(gauss, dogs)):
        scale = 2.0**o
        grads = {}
        for layer, r, c in _extrema(D, cfg.contrast_threshold):
            Dl = D[layer]
            if not _edge_ok(Dl, r, c):
                continue
            sigma = sigmas[layer]
            pr = r + _parabola(Dl[r - 1, c], Dl[r, c], Dl[r + 1, c])
            pc = c + _parabola(Dl[r, c - 1], Dl[r, c], Dl[r, c + 1])
            u, v = pc * scale, pr * scale
            support = descriptor_radius(sigma) * scale
            ri, ci = int(round(v)), int(round(u))
            if not (0 <= ri < gray.shape[0] and 0 <= ci < gray.shape[1]):
                continue
            if clearance[ri, ci] <= support + 1:
                continue
            if layer not in grads:
                grads[layer] = _gradients(G[layer])
            mag, ang = grads[layer]
            for theta in _orientations(mag, ang, r, c, sigma):
                desc = _describe(mag, ang, pr, pc, sigma, theta)
                if not desc.any():
                    continue
                found.append(Feature((u, v), sigma * scale, theta, desc, float(abs(Dl[r, c]))))
    found.sort(key=lambda f: (-f.contrast, f.position[1], f.position[0], f.orientation))
    return found[: cfg.max_features]


def descriptor_matrix(features: list[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, DESC_WIDTH * DESC_WIDTH * DESC_BINS))
    return np.stack([f.descriptor for f in features])


def positions(features: list[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, 2))
    return np.array([f.position for f in features], dtype=float)
