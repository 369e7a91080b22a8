import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from rgbd_atlas.geometry import CameraIntrinsics, DepthImage, Pose, RigExtrinsics
from rgbd_atlas.imaging import (
    AlignedColor,
    ColorImage,
    align_color_to_depth,
    align_depth_to_color,
    inpaint_color_holes,
    inpaint_depth_linear,
    ir_tone_map,
)


# --- depth inpainting ---------------------------------------------------------


def test_inpaint_depth_noop():
    d = DepthImage(np.arange(1, 13).reshape(3, 4))
    assert np.array_equal(inpaint_depth_linear(d).data, d.data)


def test_inpaint_depth_row_example():
    d = DepthImage(np.array([[100, 0, 0, 400]]))
    assert inpaint_depth_linear(d).data.tolist() == [[100, 200, 300, 400]]


def test_inpaint_depth_single_pixel():
    a = np.zeros((6, 7))
    a[4, 2] = 500
    assert (inpaint_depth_linear(DepthImage(a)).data == 500).all()


def test_inpaint_depth_row_and_column_average():
    a = np.zeros((3, 3))
    a[1, 0], a[1, 2] = 100, 300  # horizontal gives 200
    a[0, 1], a[2, 1] = 400, 800  # vertical gives 600
    out = inpaint_depth_linear(DepthImage(a)).data
    assert out[1, 1] == 400


def test_inpaint_depth_all_invalid():
    with pytest.raises(ValueError):
        inpaint_depth_linear(DepthImage(np.zeros((4, 4))))


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint16, (9, 11), elements=st.sampled_from([0, 0, 0, 500, 1200, 3000])))
def test_inpaint_depth_properties(a):
    if not (a > 0).any():
        return
    out = inpaint_depth_linear(DepthImage(a)).data
    assert (out > 0).all()
    assert np.array_equal(out[a > 0], a[a > 0])
    assert np.array_equal(inpaint_depth_linear(DepthImage(out)).data, out)
    assert out.min() >= a[a > 0].min() and out.max() <= a.max()


# --- colour to depth ----------------------------------------------------------


def test_identity_rig_is_bilinear_upsampling():
    rng = np.random.default_rng(0)
    k = CameraIntrinsics(20, 20, 9.5, 7.5, 20, 16)
    color = rng.integers(0, 256, (16, 20, 3)).astype(np.uint8)
    depth = DepthImage(rng.integers(500, 4000, (16, 20)))
    a = align_color_to_depth(ColorImage(color), depth, k, k, RigExtrinsics())
    assert a.image.data.shape == (32, 40, 3)
    assert a.valid_mask.all()
    vv, uu = np.mgrid[0:32, 0:40] / 2.0
    ref = np.stack(
        [ndimage.map_coordinates(color[..., c].astype(float), [vv, uu], order=1, mode="nearest") for c in range(3)],
        axis=-1,
    )
    assert np.array_equal(a.image.data, np.floor(ref + 0.5).astype(np.uint8))


def test_rig_translation_parallax():
    # uniform colour seen through a 5 cm baseline on a 2 m plane
    k = CameraIntrinsics(40, 40, 19.5, 19.5, 40, 40)
    color = np.full((40, 40, 3), 77, np.uint8)
    rig = RigExtrinsics(Pose(t=[0.05, 0, 0]))
    a = align_color_to_depth(ColorImage(color), DepthImage(np.full((40, 40), 2000)), k, k, rig)
    assert (a.image.data[a.valid_mask] == 77).all()
    shift = k.fx * 0.05 / 2.0  # parallax in colour pixels
    uo = np.arange(80)
    expect = (uo / 2 - shift >= -0.5) & (uo / 2 - shift <= k.width - 0.5)
    assert np.array_equal(a.valid_mask.all(axis=0), expect)
    assert np.array_equal(a.valid_mask.any(axis=0), expect)


def test_fov_outside_is_masked():
    kd = CameraIntrinsics(20, 20, 19.5, 19.5, 40, 40)  # wide
    kc = CameraIntrinsics(40, 40, 19.5, 19.5, 40, 40)  # narrow
    a = align_color_to_depth(
        ColorImage(np.full((40, 40, 3), 9, np.uint8)), DepthImage(np.full((40, 40), 1500)), kd, kc, RigExtrinsics()
    )
    assert not a.valid_mask[0, 0] and not a.valid_mask[-1, -1]
    assert a.valid_mask[40, 40]
    # the colour image covers about half the depth field of view per axis
    frac = a.valid_mask.mean()
    assert 0.2 < frac < 0.3
    assert np.array_equal(a.source_mask, a.valid_mask)


def test_align_requires_dense_depth():
    k = CameraIntrinsics(10, 10, 4.5, 4.5, 10, 10)
    d = np.full((10, 10), 1000)
    d[3, 3] = 0
    with pytest.raises(ValueError):
        align_color_to_depth(ColorImage(np.zeros((10, 10, 3))), DepthImage(d), k, k, RigExtrinsics())
    with pytest.raises(ValueError):
        align_color_to_depth(ColorImage(np.zeros((9, 10, 3))), DepthImage(np.full((10, 10), 1)), k, k, RigExtrinsics())


def test_depth_to_color_resolution():
    kd = CameraIntrinsics(20, 20, 19.5, 19.5, 40, 40)
    kc = CameraIntrinsics(40, 40, 31.5, 17.5, 64, 36)
    out = align_depth_to_color(DepthImage(np.full((40, 40), 1500)), kd, kc, RigExtrinsics())
    assert out.data.shape == (36, 64)
    assert (out.data == 1500).all()


# --- colour hole inpainting -----------------------------------------------------


def test_color_inpaint_noop():
    img = ColorImage(np.random.default_rng(1).integers(0, 256, (5, 5, 3)))
    a = AlignedColor(img, np.ones((5, 5), bool))
    out = inpaint_color_holes(a)
    assert np.array_equal(out.image.data, img.data) and out.valid_mask.all()


def test_color_inpaint_single_pixel():
    data = np.full((5, 5, 3), 42, np.uint8)
    data[2, 2] = 0
    m = np.ones((5, 5), bool)
    m[2, 2] = False
    out = inpaint_color_holes(AlignedColor(ColorImage(data), m))
    assert (out.image.data == 42).all() and out.valid_mask.all()
    assert not out.source_mask[2, 2]


def test_color_inpaint_two_colour_hole():
    data = np.zeros((7, 7, 3), np.uint8)
    data[:, :3] = 20
    data[:, 4:] = 220
    m = np.ones((7, 7), bool)
    m[:, 2:5] = False
    out = inpaint_color_holes(AlignedColor(ColorImage(data), m)).image.data
    hole = out[:, 2:5]
    assert hole.min() >= 20 and hole.max() <= 220
    assert (hole[:, 0] <= hole[:, 1]).all() and (hole[:, 1] <= hole[:, 2]).all()


def test_color_inpaint_iteration_cap():
    data = np.zeros((1, 10, 3), np.uint8)
    m = np.zeros((1, 10), bool)
    m[0, 0] = True
    out = inpaint_color_holes(AlignedColor(ColorImage(data), m), max_iterations=3)
    assert out.valid_mask[0].tolist() == [True] * 4 + [False] * 6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_color_inpaint_properties(seed):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, (12, 9, 3)).astype(np.uint8)
    m = rng.random((12, 9)) < 0.4
    out = inpaint_color_holes(AlignedColor(ColorImage(data), m))
    assert np.array_equal(out.image.data[m], data[m])
    assert (out.valid_mask >= m).all()
    if m.any():
        assert out.valid_mask.all()


# --- infrared tone map ------------------------------------------------------------


def test_tone_map_examples():
    assert ir_tone_map(np.array([0]))[0] == 0
    assert ir_tone_map(np.array([65535]))[0] == 31


def test_tone_map_exhaustive():
    I = np.arange(65536, dtype=np.uint16)
    out = ir_tone_map(I)
    ref = np.array([min(255, max(0, round(0.04 * math.pow(i, 0.6)))) for i in range(65536)], np.uint8)
    assert np.array_equal(out, ref)
    assert (np.diff(out.astype(int)) >= 0).all()
