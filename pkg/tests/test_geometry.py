import numpy as np
import pytest

import oracles
from capsvos import geometry as G
from capsvos import synth
from capsvos.errors import ContractError


def test_gt_bbox_single_pixel_and_full_frame():
    m = np.zeros((8, 9, 11), bool)
    m[:, 4, 5] = True
    b = G.ground_truth_bbox(m)
    assert (b.height, b.width, b.center_row, b.center_col) == (1.0, 1.0, 4.0, 5.0)
    b = G.ground_truth_bbox(np.ones((8, 9, 11), bool))
    assert (b.height, b.width) == (9.0, 11.0)


def test_gt_bbox_translating_object_matches_scan():
    m = np.zeros((8, 20, 40), bool)
    for t in range(8):
        m[t, 8:13, 3 + 2 * t:8 + 2 * t] = True
    b = G.ground_truth_bbox(m)
    assert (b.center_row, b.center_col, b.height, b.width) == oracles.min_covering_box(m)
    # centre col 5, rightmost pixel at col 21 in the last frame
    assert b.width == 2 * (21 - 5) + 1


def test_gt_bbox_empty_first_frame():
    m = np.zeros((3, 5, 5), bool)
    m[1, 2, 2] = True
    with pytest.raises(ContractError):
        G.ground_truth_bbox(m)


@pytest.mark.parametrize("seed", range(20))
def test_gt_bbox_random_blobs(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((4, 12, 15)) > 0.93
    m[0, rng.integers(12), rng.integers(15)] = True
    b = G.ground_truth_bbox(m)
    assert (b.center_row, b.center_col, b.height, b.width) == oracles.min_covering_box(m)


def test_gt_bbox_on_synthetic_clips():
    for i, sc in enumerate(synth.SCENARIOS):
        spec = synth.make_scene(sc, 100 + i)
        clip = synth.generate_clip(spec, 0)
        if not clip.masks[0].any():
            continue
        b = G.ground_truth_bbox(clip.masks)
        assert (b.center_row, b.center_col, b.height, b.width) == oracles.min_covering_box(clip.masks)


def test_crop_identity(rng):
    img = rng.random((2, 9, 13, 3))
    out = G.crop_and_resize(img, G.BoundingBox.full_frame(9, 13), (9, 13))
    assert np.max(np.abs(out - img)) <= 1e-12
    mask = rng.random((9, 13)) > 0.5
    _, m = G.crop_and_resize(img, G.BoundingBox.full_frame(9, 13), (9, 13), mask)
    assert np.array_equal(m, mask)


def test_crop_constant_region(rng):
    img = rng.random((20, 30, 1))
    img[4:14, 6:22] = 0.625
    out = G.crop_and_resize(img, G.BoundingBox(8.5, 13.5, 8.0, 12.0), (5, 7))
    assert np.allclose(out, 0.625, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_crop_matches_bilinear_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((8, 8))
    h, w = rng.uniform(2, 8, 2)
    top, left = rng.uniform(0, 8 - h), rng.uniform(0, 8 - w)
    box = G.BoundingBox(top + h / 2 - 0.5, left + w / 2 - 0.5, h, w)
    got = G.crop_and_resize(img[..., None], box, (4, 4))[..., 0]
    want = oracles.crop_resize(img, box.top, box.left, h, w, 4, 4)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_degenerate_box_expands():
    img = np.arange(64, dtype=float).reshape(8, 8, 1)
    out = G.crop_and_resize(img, G.BoundingBox(3.0, 3.0, 0.5, 1.0), (2, 2))
    assert np.all(np.isfinite(out))
    want = oracles.crop_resize(img[..., 0], 2.5, 2.5, 2.0, 2.0, 2, 2)
    assert np.allclose(out[..., 0], want, atol=1e-12)


def test_clamped_box_inside_frame(rng):
    for _ in range(200):
        b = G.BoundingBox(*rng.uniform(-20, 60, 2), *rng.uniform(0.1, 90, 2))
        c = b.clamped(32, 56, 16, 28)
        assert 0 < c.height <= 32 and 0 < c.width <= 56
        assert G.BoundingBox.full_frame(32, 56).contains(c)


def test_paste_back_zero_outside_and_inverse_of_crop(rng):
    box = G.BoundingBox(10.0, 15.0, 9.0, 13.0)
    pred = rng.uniform(0.2, 1.0, (6, 8))
    full = G.paste_back(pred, box, (24, 32))
    inside = np.zeros((24, 32), bool)
    inside[6:15, 9:22] = True
    assert not full[~inside].any()
    assert np.all(full[inside] > 0)
    const = G.paste_back(np.full((6, 8), 0.3), box, (24, 32))
    assert np.allclose(const[inside], 0.3)
    img = rng.random((24, 32))
    small = G.crop_and_resize(img[..., None], G.BoundingBox.full_frame(24, 32), (24, 32))[..., 0]
    back = G.paste_back(small, G.BoundingBox.full_frame(24, 32), (24, 32))
    assert np.allclose(back, img)


def test_realign_identity_and_shift(rng):
    box = G.BoundingBox(10.0, 12.0, 8.0, 16.0)
    ry, rx = G.realign_matrices(box, box, (4, 8))
    assert np.allclose(ry, np.eye(4)) and np.allclose(rx, np.eye(8))
    moved = G.BoundingBox(10.0, 12.0 + 4.0, 8.0, 16.0)
    _, rx = G.realign_matrices(box, moved, (4, 8))
    assert np.allclose(rx[:6, 2:], np.eye(6)) and not rx[6:].any()


def test_union_box_and_centroid():
    m = np.zeros((2, 10, 10), bool)
    m[0, 2:4, 3:6] = True
    m[1, 7, 8] = True
    b = G.union_box(m)
    assert (b.top, b.left, b.height, b.width) == (2.0, 3.0, 6.0, 6.0)
    assert G.mask_centroid(m[1]) == (7.0, 8.0)
    assert G.mask_centroid(np.zeros((3, 3))) is None
