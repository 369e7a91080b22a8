"""Appearance-based loop detection and metric verification.

Keyframes are described by SIFT features taken from the reprojection-valid
area of their aligned colour image. A frozen visual vocabulary turns each
keyframe into a tf-idf signature for candidate retrieval; candidates are
verified by RANSAC over depth-lifted matches and refined with ICP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import sift
from .cluster import kmeans
from .geometry import (
    CameraIntrinsics,
    DegenerateInputError,
    DepthImage,
    PointCloud,
    Pose,
    depth_to_points,
    unproject_with_normals,
    umeyama_align,
)
from .imaging import AlignedColor
from .odometry import IcpConfig, IcpFailure, icp_point_to_plane

Feature = sift.Feature


@dataclass(frozen=True)
class LoopConfig:
    max_features: int = 500
    vocabulary_size: int = 256
    vocabulary_seed: int = 42
    top_k: int = 5
    exclusion_window: int = 30
    min_similarity: float = 0.0
    ratio_test: float = 0.8
    ransac_iterations: int = 1000
    inlier_threshold: float = 0.05
    min_inliers: int = 20
    refine_fitness_min: float = 0.3
    refine_stride: int = 2

    def __post_init__(self):
        for name in ("max_features", "vocabulary_size", "top_k", "ransac_iterations", "min_inliers", "refine_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.exclusion_window < 0:
            raise ValueError("exclusion_window must be non-negative")
        if not 0 < self.ratio_test <= 1:
            raise ValueError("ratio_test must lie in (0, 1]")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.refine_fitness_min <= 1:
            raise ValueError("refine_fitness_min must lie in (0, 1]")
        if not 0 <= self.min_similarity <= 1:
            raise ValueError("min_similarity must lie in [0, 1]")


def detect_features(img: AlignedColor, max_features: int = 500) -> list[Feature]:
    """SIFT features restricted to the reprojection-valid area of ``img``."""
    cfg = sift.SiftConfig(max_features=max_features)
    return sift.detect_features(img.image.gray(), img.source_mask, cfg)


# ---------------------------------------------------------------------------
# bag of words
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Vocabulary:
    words: np.ndarray
    doc_frequency: np.ndarray
    num_docs: int

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=float).reshape(-1, 128)
        self.doc_frequency = np.asarray(self.doc_frequency, dtype=np.int64)
        if len(self.doc_frequency) != len(self.words):
            raise ValueError("doc_frequency must have one entry per word")
        if (self.doc_frequency > self.num_docs).any():
            raise ValueError("doc_frequency cannot exceed num_docs")
        self._tree = cKDTree(self.words) if len(self.words) else None

    def __len__(self) -> int:
        return len(self.words)

    def quantize(self, descriptors: np.ndarray) -> np.ndarray:
        if self._tree is None:
            raise ValueError("empty vocabulary")
        if len(descriptors) == 0:
            return np.zeros(0, dtype=np.int64)
        _, idx = self._tree.query(descriptors)
        return idx.astype(np.int64)

    def idf(self) -> np.ndarray:
        return np.log(self.num_docs / np.maximum(self.doc_frequency, 1))


def build_vocabulary(documents: list[np.ndarray], size: int = 256, seed: int = 42) -> Vocabulary:
    """k-means vocabulary over the stacked descriptors of ``documents``."""
    docs = [np.asarray(d, dtype=float).reshape(-1, 128) for d in documents]
    stacked = np.concatenate(docs) if docs else np.zeros((0, 128))
    if len(stacked) == 0:
        raise ValueError("cannot build a vocabulary without descriptors")
    words, _ = kmeans(stacked, size, seed=seed)
    vocab = Vocabulary(words, np.zeros(len(words), dtype=np.int64), len(docs))
    df = np.zeros(len(words), dtype=np.int64)
    for d in docs:
        if len(d):
            df[np.unique(vocab.quantize(d))] += 1
    vocab.doc_frequency = df
    return vocab


def bow_signature(features, vocab: Vocabulary) -> dict[int, float]:
    """L2-normalised sparse tf-idf vector ``{word: weight}``."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    desc = features if isinstance(features, np.ndarray) else sift.descriptor_matrix(features)
    if len(desc) == 0:
        return {}
    words = vocab.quantize(desc)
    counts = np.bincount(words, minlength=len(vocab)).astype(float)
    weights = counts / counts.sum() * vocab.idf()
    nz = np.nonzero(weights > 0)[0]
    norm = float(np.linalg.norm(weights[nz]))
    if norm == 0:
        return {}
    return {int(w): float(weights[w] / norm) for w in nz}


def cosine(a: dict[int, float], b: dict[int, float]) -> float:
    if len(a) > len(b):
        a, b = b, a
    return float(sum(v * b.get(w, 0.0) for w, v in a.items()))


@dataclass(frozen=True)
class DbEntry:
    key: object
    session: int
    index: int
    signature: dict
    group: int = 0


class BowDatabase:
    """Inverted-file free flat database; small enough for linear scans."""

    def __init__(self):
        self.entries: list[DbEntry] = []

    def add(self, key, session: int, index: int, signature: dict, group: int = 0) -> None:
        self.entries.append(DbEntry(key, session, index, signature, group))


def query(
    db: BowDatabase,
    signature: dict,
    top_k: int = 5,
    exclusion_window: int = 30,
    session: int | None = None,
    index: int | None = None,
    group: int = 0,
    min_similarity: float = 0.0,
) -> list[tuple[object, float]]:
    """Top-k entries by cosine similarity, best first.

    Entries of the same session and map group whose keyframe index lies
    within ``exclusion_window`` of ``index`` are skipped.
    """
    scored = []
    for e in db.entries:
        if (
            session is not None
            and index is not None
            and e.session == session
            and e.group == group
            and abs(e.index - index) <= exclusion_window
        ):
            continue
        sim = cosine(signature, e.signature)
        if sim > min_similarity or (min_similarity == 0 and sim > 0):
            scored.append((sim, e.session, e.index, e.key))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    return [(key, sim) for sim, _, _, key in scored[:top_k]]


# ---------------------------------------------------------------------------
# metric verification
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LoopKeyframe:
    """Everything loop verification needs about one keyframe.

    Feature positions live in the image the features were detected in;
    ``lift_scale`` converts them to pixels of ``depth``.
    """

    key: object
    features: list[Feature]
    depth: DepthImage
    k: CameraIntrinsics
    lift_scale: float = 0.5
    _lifted: tuple | None = field(default=None, repr=False)
    _cloud_n: PointCloud | None = field(default=None, repr=False)

    def lifted(self) -> tuple[np.ndarray, np.ndarray]:
        """``(descriptors, points)`` for features that land on valid depth."""
        if self._lifted is None:
            desc = sift.descriptor_matrix(self.features)
            pos = sift.positions(self.features) * self.lift_scale
            ui = np.floor(pos[:, 0] + 0.5).astype(int)
            vi = np.floor(pos[:, 1] + 0.5).astype(int)
            ok = (ui >= 0) & (ui < self.depth.width) & (vi >= 0) & (vi < self.depth.height)
            ok[ok] &= self.depth.data[vi[ok], ui[ok]] > 0
            P = depth_to_points(self.depth, self.k)
            self._lifted = (desc[ok], P[vi[ok], ui[ok]])
        return self._lifted

    def cloud_with_normals(self, stride: int) -> PointCloud:
        if self._cloud_n is None:
            self._cloud_n = unproject_with_normals(self.depth, self.k, stride)
        return self._cloud_n


@dataclass
class LoopEdgeCandidate:
    """``relative`` maps points of ``to_kf`` into the frame of ``from_kf``."""

    from_kf: object
    to_kf: object
    relative: Pose
    inliers: int
    icp_rmse: float
    ransac: Pose | None = None
    matches: tuple | None = field(default=None, repr=False)


def mutual_matches(da: np.ndarray, db: np.ndarray, ratio: float = 0.8) -> np.ndarray:
    """Index pairs ``(i, j)`` that are mutual nearest neighbours and pass the ratio test."""
    if len(da) < 2 or len(db) < 2:
        return np.zeros((0, 2), dtype=int)
    D = np.sqrt(np.maximum((da * da).sum(1)[:, None] - 2 * da @ db.T + (db * db).sum(1)[None], 0))
    ab = np.argsort(D, axis=1, kind="stable")[:, :2]
    ba = np.argmin(D, axis=0)
    i = np.arange(len(da))
    best = D[i, ab[:, 0]]
    second = D[i, ab[:, 1]]
    keep = (ba[ab[:, 0]] == i) & (best < ratio * second)
    # identical descriptors give 0 < 0 == False; accept exact duplicates of the query
    keep |= (ba[ab[:, 0]] == i) & (best == 0) & (second > 0)
    return np.stack([i[keep], ab[keep, 0]], axis=1)


def ransac_rigid(
    src: np.ndarray,
    dst: np.ndarray,
    threshold: float,
    iterations: int,
    seed: int = 0,
    confidence: float = 0.999,
) -> tuple[Pose | None, np.ndarray]:
    """3-point RANSAC for ``dst ~ T(src)`` followed by a refit on all inliers."""
    n = len(src)
    if n < 3:
        return None, np.zeros(n, dtype=bool)
    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            T = umeyama_align(src[idx], dst[idx])
        except DegenerateInputError:
            continue
        err = np.linalg.norm(T.apply(src) - dst, axis=1)
        mask = err < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            frac = count / n
            if frac >= 1.0:
                needed = it
            else:
                denom = math.log(max(1e-12, 1 - frac**3))
                needed = int(math.ceil(math.log(1 - confidence) / denom)) if denom < 0 else iterations
    if best_count < 3:
        return None, best_mask
    try:
        T = umeyama_align(src[best_mask], dst[best_mask])
    except DegenerateInputError:
        return None, best_mask
    mask = np.linalg.norm(T.apply(src) - dst, axis=1) < threshold
    if mask.sum() > best_count:
        try:
            T = umeyama_align(src[mask], dst[mask])
            best_mask = mask
        except DegenerateInputError:
            pass
    return T, best_mask


def estimate_loop_transform(
    kf_a: LoopKeyframe,
    kf_b: LoopKeyframe,
    cfg: LoopConfig = LoopConfig(),
    icp: IcpConfig = IcpConfig(),
    seed: int = 0,
) -> LoopEdgeCandidate | None:
    """Metric loop between two keyframes, or ``None`` when it fails a check."""
    da, pa = kf_a.lifted()
    db, pb = kf_b.lifted()
    if len(da) < cfg.min_inliers or len(db) < cfg.min_inliers:
        return None
    m = mutual_matches(da, db, cfg.ratio_test)
    if len(m) < cfg.min_inliers:
        return None
    src, dst = pb[m[:, 1]], pa[m[:, 0]]
    T, inl = ransac_rigid(src, dst, cfg.inlier_threshold, cfg.ransac_iterations, seed)
    if T is None or inl.sum() < cfg.min_inliers:
        return None
    try:
        refined, fitness, rmse = icp_point_to_plane(
            kf_b.cloud_with_normals(cfg.refine_stride), kf_a.cloud_with_normals(cfg.refine_stride), T, icp
        )
    except IcpFailure:
        return None
    if fitness < cfg.refine_fitness_min:
        return None
    return LoopEdgeCandidate(kf_a.key, kf_b.key, refined, int(inl.sum()), rmse, T, (m[inl], src[inl], dst[inl]))
