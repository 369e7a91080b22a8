"""Deterministic k-means (k-means++ seeding, Lloyd iterations)."""

from __future__ import annotations

import numpy as np


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(x: np.ndarray, centers: np.ndarray, chunk: int = 65536) -> np.ndarray:
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), chunk):
        out[s : s + chunk] = _sq_dists(x[s : s + chunk], centers).argmin(1)
    return out


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    max_iterations: int = 50,
    min_change: float = 0.001,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(centers, labels)``.

    Stops after ``max_iterations`` Lloyd steps or once fewer than
    ``min_change`` of the points change cluster. Empty clusters keep their
    previous centre.
    """
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise ValueError("k-means needs at least one point")
    k = max(1, min(k, len(x)))
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, k, rng)
    labels = assign(x, centers)
    for _ in range(max_iterations):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        new = assign(x, centers)
        changed = np.count_nonzero(new != labels)
        labels = new
        if changed < min_change * len(x):
            break
    return centers, labels
