import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rgbd_atlas import sift
from rgbd_atlas import synthetic as S
from rgbd_atlas.geometry import Pose, se3_exp, umeyama_align
from rgbd_atlas.imaging import AlignedColor, ColorImage
from rgbd_atlas.loop_closure import (
    BowDatabase,
    LoopConfig,
    LoopKeyframe,
    Vocabulary,
    bow_signature,
    build_vocabulary,
    detect_features,
    estimate_loop_transform,
    mutual_matches,
    query,
    ransac_rigid,
)

K = S.default_depth_intrinsics()
K2 = K.scaled(2)  # aligned colour lives on a grid twice as dense as depth
SCENE = S.corridor_scene(0)

# (position, forward) viewpoints spread around the ring corridor
VIEWS = [
    ((2.3, -1.6, 1.3), (0.1, 1, 0)),
    ((-2.3, 1.6, 1.3), (-0.1, -1, 0)),
    ((-1.0, -1.8, 1.2), (1, 0.2, 0)),
    ((1.0, 1.8, 1.4), (-1, -0.2, 0)),
    ((-2.2, -1.4, 1.3), (0.3, -1, 0)),
    ((2.2, 1.3, 1.3), (-0.3, 1, 0)),
]


def full_mask(k):
    return np.ones((k.height, k.width), bool)


def keyframe(key, pose):
    color = S.render_color(SCENE, pose, K2)
    feats = detect_features(AlignedColor(color, full_mask(K2)))
    return LoopKeyframe(key, feats, S.render_depth(SCENE, pose, K), K, 0.5)


@pytest.fixture(scope="module")
def gray():
    kc = S.CameraIntrinsics(128, 128, 95.5, 95.5, 192, 192)
    return S.render_color(SCENE, S.look_pose([2.3, -1.6, 1.3], [0.2, 1, 0.05]), kc).gray()


@pytest.fixture(scope="module")
def revisit():
    base = [S.look_pose(p, f) for p, f in VIEWS]
    moved = [Pose(p.q, p.t + [0.1, 0, 0]) for p in base]
    kfs0 = [keyframe((0, i), p) for i, p in enumerate(base)]
    kfs1 = [keyframe((1, i), p) for i, p in enumerate(moved)]
    vocab = build_vocabulary([sift.descriptor_matrix(k.features) for k in kfs0], 256, 42)
    return kfs0, kfs1, vocab


# --- features -------------------------------------------------------------------


def test_uniform_image_has_no_features():
    img = AlignedColor(ColorImage(np.full((64, 64, 3), 128, np.uint8)), np.ones((64, 64), bool))
    assert detect_features(img) == []


def test_rotation_self_match(gray):
    fa = sift.detect_features(gray)
    fb = sift.detect_features(np.rot90(gray))
    assert len(fa) > 50
    m = mutual_matches(sift.descriptor_matrix(fa), sift.descriptor_matrix(fb), 1.0)
    W = gray.shape[1]
    pa = sift.positions(fa)[m[:, 0]]
    pb = sift.positions(fb)[m[:, 1]]
    # rot90 sends (u, v) to (v, W - 1 - u)
    ok = np.linalg.norm(np.c_[pa[:, 1], W - 1 - pa[:, 0]] - pb, axis=1) < 2
    assert ok.sum() >= 0.7 * min(len(fa), len(fb))


@pytest.mark.parametrize("alpha,beta", [(0.8, 0.1), (0.6, 0.2), (1.1, -0.02)])
def test_affine_brightness_invariance(gray, alpha, beta):
    fa = sift.detect_features(gray)
    fb = sift.detect_features(np.clip(alpha * gray + beta, 0, 1))
    m = mutual_matches(sift.descriptor_matrix(fa), sift.descriptor_matrix(fb), 1.0)
    same = np.linalg.norm(sift.positions(fa)[m[:, 0]] - sift.positions(fb)[m[:, 1]], axis=1) < 1e-9
    assert same.sum() >= 0.95 * min(len(fa), len(fb))


def test_masked_hole_drops_features(gray):
    feats = sift.detect_features(gray)
    u, v = feats[0].position
    vv, uu = np.mgrid[0 : gray.shape[0], 0 : gray.shape[1]]
    mask = (uu - u) ** 2 + (vv - v) ** 2 > 6**2
    kept = sift.detect_features(gray, mask)
    assert len(kept) > 0
    for f in kept:
        r = sift.descriptor_radius(f.scale)
        assert math.hypot(f.position[0] - u, f.position[1] - v) > r + 6 - 1e-9
    assert not any(f.position == feats[0].position for f in kept)


def test_descriptors_unit_norm(gray):
    D = sift.descriptor_matrix(sift.detect_features(gray))
    assert D.shape[1] == 128
    assert np.allclose(np.linalg.norm(D, axis=1), 1.0)


# --- bag of words -----------------------------------------------------------------


def test_empty_vocabulary_errors():
    v = Vocabulary(np.zeros((0, 128)), np.zeros(0, int), 0)
    with pytest.raises(ValueError):
        bow_signature(np.ones((1, 128)), v)
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_self_match_across_sessions(revisit):
    kfs0, _, vocab = revisit
    db = BowDatabase()
    for i, k in enumerate(kfs0):
        db.add(("copy", i), 1, i, bow_signature(k.features, vocab))
    sig = bow_signature(kfs0[2].features, vocab)
    res = query(db, sig, session=0, index=2)
    assert res[0][0] == ("copy", 2) and abs(res[0][1] - 1.0) < 1e-12


def test_revisit_mutual_top1(revisit):
    kfs0, kfs1, vocab = revisit
    sigs = [[bow_signature(k.features, vocab) for k in ks] for ks in (kfs0, kfs1)]
    dbs = [BowDatabase(), BowDatabase()]
    for s in (0, 1):
        for i, sg in enumerate(sigs[s]):
            dbs[s].add((s, i), s, i, sg)
    for i in range(len(VIEWS)):
        assert query(dbs[0], sigs[1][i], top_k=1, session=1, index=i)[0][0] == (0, i)
        assert query(dbs[1], sigs[0][i], top_k=1, session=0, index=i)[0][0] == (1, i)


def test_exclusion_window():
    db = BowDatabase()
    sig = {3: 1.0}
    db.add("near", 0, 10, sig)
    db.add("far", 0, 50, sig)
    db.add("other_session", 1, 14, sig)
    db.add("other_map", 0, 12, sig, group=1)
    keys = [k for k, _ in query(db, sig, session=0, index=15, exclusion_window=30)]
    assert "near" not in keys
    assert set(keys) == {"far", "other_session", "other_map"}


def test_duplicated_descriptors_keep_ranking(revisit):
    kfs0, kfs1, vocab = revisit
    db = BowDatabase()
    for i, k in enumerate(kfs0):
        db.add(i, 0, i, bow_signature(k.features, vocab))
    D = sift.descriptor_matrix(kfs1[3].features)
    a = query(db, bow_signature(D, vocab), top_k=6)
    b = query(db, bow_signature(np.concatenate([D, D]), vocab), top_k=6)
    assert [k for k, _ in a] == [k for k, _ in b]
    assert np.allclose([s for _, s in a], [s for _, s in b], atol=1e-12)


# --- metric verification -------------------------------------------------------------


def test_ransac_outlier_free_is_umeyama():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(40, 3))
    T = se3_exp([0.2, -0.1, 0.3, 0.5, 0.1, -0.4])
    dst = T.apply(src) + rng.normal(scale=1e-3, size=src.shape)
    R, inl = ransac_rigid(src, dst, 0.05, 1000)
    ref = umeyama_align(src, dst)
    assert inl.all()
    assert np.allclose(R.matrix(), ref.matrix(), atol=1e-12)


def test_ransac_rejects_outliers():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(60, 3))
    T = se3_exp([0.3, 0.2, -0.1, 0.1, 0.4, 0.2])
    dst = T.apply(src)
    dst[:20] = rng.normal(size=(20, 3)) * 3
    R, inl = ransac_rigid(src, dst, 0.05, 1000)
    assert inl[20:].all() and not inl[:20].any()
    dt, dr = R.distance_to(T)
    assert dt < 1e-9 and dr < 1e-9


def test_loop_self():
    a = keyframe("a", S.look_pose(*VIEWS[0]))
    c = estimate_loop_transform(a, a)
    assert c.inliers == len(mutual_matches(a.lifted()[0], a.lifted()[0]))
    assert np.linalg.norm(c.relative.t) < 1e-9 and c.relative.angle() < 1e-9


def test_loop_known_relative_pose():
    A = S.look_pose(*VIEWS[0])
    rel = Pose.from_rt(Rotation.from_euler("y", 10, degrees=True).as_matrix(), [0.3 / math.sqrt(2), 0, 0.3 / math.sqrt(2)])
    B = A @ rel
    assert abs(np.linalg.norm(rel.t) - 0.3) < 1e-9 and abs(math.degrees(rel.angle()) - 10) < 1e-9
    a, b = keyframe("a", A), keyframe("b", B)
    c = estimate_loop_transform(a, b)
    assert c is not None and c.inliers >= 20
    E = rel.inverse() @ c.relative
    assert np.linalg.norm(E.t) < 0.01 and math.degrees(E.angle()) < 0.5
    # a-posteriori check of the RANSAC inlier set
    _, src, dst = c.matches
    assert (np.linalg.norm(c.ransac.apply(src) - dst, axis=1) < 0.05).sum() >= c.inliers


def test_loop_disjoint_rejected():
    a = keyframe("a", S.look_pose(*VIEWS[0]))
    b = keyframe("b", S.look_pose(*VIEWS[1]))
    assert estimate_loop_transform(a, b) is None


def test_loop_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(ratio_test=0)
    with pytest.raises(ValueError):
        LoopConfig(min_inliers=0)
