import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordet.geometry import (DETECTION_SPECS, Box, CropSpec, RelLoc, apply_rel_loc, apply_rel_loc_array,
                             coverage_fraction, coverage_fraction_array, crop_region, iou, iou_matrix,
                             rel_loc, rel_loc_array, resample, sample_crop, sample_crops, pad_with_mean,
                             coverage_search)

coord = st.floats(-200, 200, allow_nan=False)
size = st.floats(0.5, 120, allow_nan=False)
boxes = st.builds(Box, coord, coord, size, size)


def corner_iou(a, b):
    # written against corner tuples, independent of the center-size code path
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def test_box_rejects_non_positive_size():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, 1, -2)


@given(boxes)
def test_corner_round_trip(b):
    back = Box.from_corners(*b.corners())
    assert np.allclose(back.as_array(), b.as_array(), atol=1e-9, rtol=0)


def test_iou_examples():
    b = Box(3, 4, 5, 6)
    assert iou(b, b) == 1.0
    assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0
    assert iou(Box(5, 5, 10, 10), Box(10, 5, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0, 50, (20, 2)), rng.uniform(1, 30, (20, 2))])
    b = np.column_stack([rng.uniform(0, 50, (7, 2)), rng.uniform(1, 30, (7, 2))])
    m = iou_matrix(a, b)
    for i in range(20):
        for j in range(7):
            assert m[i, j] == pytest.approx(corner_iou(Box(*a[i]).corners(), Box(*b[j]).corners()), abs=1e-12)


def test_rel_loc_examples():
    assert rel_loc(Box(1, 2, 3, 4), Box(1, 2, 3, 4)) == RelLoc(0, 0, 0, 0)
    r = rel_loc(Box(12, 10, 20, 20), Box(10, 10, 10, 20))
    assert np.allclose(r.as_array(), [0.1, 0, math.log(2), 0], atol=1e-15)
    r = rel_loc(Box(10, 14, 20, 10), Box(10, 10, 20, 20))
    assert np.allclose(r.as_array(), [0, 0.4, 0, -math.log(2)], atol=1e-15)


def test_apply_rel_loc_examples():
    c = Box(7, 8, 9, 10)
    assert apply_rel_loc(c, RelLoc(0, 0, 0, 0)) == c
    g = apply_rel_loc(Box(12, 10, 20, 20), RelLoc(0.1, 0, math.log(2), 0))
    assert np.allclose(g.as_array(), [10, 10, 10, 20], atol=1e-12)


@settings(max_examples=200)
@given(boxes, boxes)
def test_rel_loc_round_trip(c, g):
    back = apply_rel_loc(c, rel_loc(c, g))
    assert np.allclose(back.as_array(), g.as_array(), atol=1e-9, rtol=0)
    assert np.all(np.isfinite(rel_loc(c, g).as_array()))


def test_array_forms_agree_with_scalar():
    rng = np.random.default_rng(1)
    c = np.column_stack([rng.uniform(0, 90, (50, 2)), rng.uniform(2, 40, (50, 2))])
    g = np.column_stack([rng.uniform(0, 90, (50, 2)), rng.uniform(2, 40, (50, 2))])
    r = rel_loc_array(c, g)
    for i in range(50):
        assert np.allclose(r[i], rel_loc(Box(*c[i]), Box(*g[i])).as_array(), atol=1e-14)
    assert np.allclose(apply_rel_loc_array(c, r), g, atol=1e-9)


def test_crop_region_examples():
    w = Box(50, 50, 20, 20)
    assert crop_region(w, 1.0) == w
    assert crop_region(w, CropSpec(0, 2.7)).as_array() == pytest.approx([50, 50, 54, 54])
    assert crop_region(w, CropSpec(0, 0.8)).as_array() == pytest.approx([50, 50, 16, 16])


def test_crop_spec_set():
    assert [(s.rotation, s.scale) for s in DETECTION_SPECS] == [(0, 0.8), (0, 1.2), (45, 1.2), (90, 1.2),
                                                               (0, 1.8), (0, 2.7)]
    assert CropSpec.from_tag(CropSpec(45, 1.2).tag) == CropSpec(45, 1.2)
    with pytest.raises(ValueError):
        CropSpec(30, 1.2)


def test_coverage_examples():
    g = Box(10, 10, 8, 6)
    assert coverage_fraction(g, g, 1.0) == 1.0
    assert coverage_fraction(g, g, 2.7) == 1.0
    assert coverage_fraction(Box(5, 5, 10, 10), Box(15, 5, 10, 10), 1.0) == 0.0
    assert coverage_fraction(Box(5, 5, 10, 10), Box(10, 5, 10, 10), 2.7) == 1.0
    with pytest.raises(ValueError):
        coverage_fraction(g, g, 0.0)


@given(boxes, boxes, st.floats(0.1, 5), st.floats(0.0, 3))
def test_coverage_monotone_in_scale(w, g, s, ds):
    assert coverage_fraction(w, g, s) <= coverage_fraction(w, g, s + ds) + 1e-12


def test_coverage_array_matches_scalar():
    rng = np.random.default_rng(2)
    w = np.column_stack([rng.uniform(0, 50, (40, 2)), rng.uniform(1, 30, (40, 2))])
    g = np.column_stack([rng.uniform(0, 50, (40, 2)), rng.uniform(1, 30, (40, 2))])
    cov = coverage_fraction_array(w, g, 1.8)
    for i in range(40):
        assert cov[i] == pytest.approx(coverage_fraction(Box(*w[i]), Box(*g[i]), 1.8), abs=1e-12)


def test_small_coverage_search_has_no_violations():
    worst, violations = coverage_search(20_000, seed=3)
    assert violations == []
    assert 0.5 < worst <= 1.0


# --------------------------------------------------------------------------
# crop sampling


def test_identity_crop_copies_pixels():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(40, 50))
    # window covering rows 10..25, cols 5..20 exactly
    out = resample(img, Box.from_corners(5, 10, 21, 26), 0, 1.0, 16)
    assert np.allclose(out, img[10:26, 5:21], atol=1e-12)


@pytest.mark.parametrize("spec", DETECTION_SPECS)
def test_constant_scene_gives_constant_crop(spec):
    img = np.full((30, 30), 0.37)
    out = sample_crop(img, Box(3, 28, 40, 15), spec, 12)
    assert out.shape == (12, 12)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_out_of_scene_samples_take_the_mean():
    img = np.zeros((20, 20))
    img[:, 10:] = 1.0
    out = sample_crop(img, Box(-200, -200, 10, 10), CropSpec(0, 1.2), 8)
    assert np.allclose(out, img.mean())


def test_rejects_tiny_output():
    with pytest.raises(ValueError):
        sample_crop(np.zeros((10, 10)), Box(5, 5, 4, 4), CropSpec(0, 1.2), 7)


def test_two_quarter_turns_equal_a_half_turn():
    y, x = np.mgrid[0:33, 0:33]
    pattern = np.exp(-((x - 16) ** 2 + (y - 10) ** 2) / 30.0) + 0.5 * np.exp(-((x - 24) ** 2 + (y - 20) ** 2) / 20.0)
    win = Box(16.5, 16.5, 33, 33)
    once = resample(pattern, win, 90, 1.0, 33)
    twice = resample(once, win, 90, 1.0, 33)
    half = resample(pattern, win, 180, 1.0, 33)
    assert np.abs(twice - half).mean() < 1e-3


def test_rotation_is_anticlockwise():
    # bright pixel right of center; after rotating the content anti-clockwise
    # by 90 degrees it must sit above the center (y points down)
    img = np.zeros((21, 21))
    img[10, 16] = 1.0
    out = resample(img, Box(10.5, 10.5, 21, 21), 90, 1.0, 21)
    r, c = np.unravel_index(np.argmax(out), out.shape)
    assert (r, c) == (4, 10)


def test_batched_crops_match_single():
    rng = np.random.default_rng(4)
    imgs = rng.uniform(size=(3, 24, 24))
    padded = np.stack([pad_with_mean(i) for i in imgs])
    wins = np.array([[10, 12, 8, 6], [3, 20, 10, 10], [12, 12, 20, 5]], dtype=float)
    idx = np.array([2, 0, 1])
    spec = CropSpec(45, 1.8)
    batch = sample_crops(padded, idx, wins, spec, 10)
    for k in range(3):
        assert np.allclose(batch[k], sample_crop(imgs[idx[k]], Box(*wins[k]), spec, 10), atol=1e-12)
