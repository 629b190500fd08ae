"""Flip geometry tests: box reflection, center pairing, flip-back fields,
and the mirrored-prediction zero point of the consistency terms.
"""

import numpy as np
import pytest

import maskdet.autodiff as ad
from maskdet import BBox, GridConfig
from maskdet.flips import (
    flip_back_heatmap,
    flip_back_regression,
    flip_box,
    flip_sample,
)
from maskdet.losses import (
    heatmap_consistency_loss,
    localization_consistency_loss,
)


def test_flip_box_hand_case():
    b = flip_box(BBox(10.0, 5.0, 20.0, 15.0, 1), 64.0)
    assert (b.x1, b.y1, b.x2, b.y2) == (44.0, 5.0, 54.0, 15.0)
    assert b.class_id == 1


def test_flip_box_involution():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x1 = float(rng.uniform(0, 40))
        y1 = float(rng.uniform(0, 40))
        b = BBox(x1, y1, x1 + float(rng.uniform(2, 20)),
                 y1 + float(rng.uniform(2, 20)), int(rng.integers(0, 2)))
        bb = flip_box(flip_box(b, 64.0), 64.0)
        assert bb.x1 == pytest.approx(b.x1, abs=1e-12)
        assert bb.x2 == pytest.approx(b.x2, abs=1e-12)
        assert (bb.y1, bb.y2, bb.class_id) == (b.y1, b.y2, b.class_id)


def test_flip_sample_mirrors_image_and_checks_shape():
    cfg = GridConfig(64, 64, 4, 2)
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (64, 64, 3))
    pair = flip_sample(img, [BBox(9.0, 9.0, 19.0, 21.0, 0)], cfg)
    assert np.array_equal(pair.flipped_image, img[:, ::-1])
    # flipping the flipped image restores the original
    back = flip_sample(pair.flipped_image, pair.flipped_boxes, cfg)
    assert np.array_equal(back.flipped_image, img)
    with pytest.raises(ValueError):
        flip_sample(np.zeros((32, 64, 3)), [], cfg)


def test_center_pairs_mirror_when_offset_nonzero():
    cfg = GridConfig(64, 64, 4, 2)
    img = np.zeros((64, 64, 3))
    # center x = 14.0 -> cell 3, fraction 0.5 (nonzero)
    pair = flip_sample(img, [BBox(9.0, 9.0, 19.0, 21.0, 0)], cfg)
    (p, q), = pair.center_pairs
    assert (p.i, p.j) == (3, 3)
    assert (q.i, q.j) == (16 - 1 - 3, 3)


def test_center_pairs_shift_one_cell_at_zero_offset():
    cfg = GridConfig(64, 64, 4, 2)
    img = np.zeros((64, 64, 3))
    # center x = 8.0 sits exactly on a stride multiple: fraction 0, and the
    # mirrored center projects to gw - i rather than gw - 1 - i
    pair = flip_sample(img, [BBox(4.0, 9.0, 12.0, 21.0, 0)], cfg)
    (p, q), = pair.center_pairs
    assert p.i == 2
    assert q.i == 16 - 2


def test_flip_back_heatmap_mirrors_columns():
    rng = np.random.default_rng(3)
    y = rng.uniform(0, 1, (4, 6, 2))
    back = np.asarray(ad.value(flip_back_heatmap(y)))
    assert np.array_equal(back, y[:, ::-1])


def test_flip_back_regression_negates_horizontal_offset():
    o = np.zeros((2, 4, 2))
    s = np.zeros((2, 4, 2))
    o[0, 1] = (0.3, 0.2)
    s[0, 1] = (5.0, 7.0)
    fo, fs = flip_back_regression(o, s)
    fo, fs = np.asarray(ad.value(fo)), np.asarray(ad.value(fs))
    assert fo[0, 2, 0] == pytest.approx(-0.3)
    assert fo[0, 2, 1] == pytest.approx(0.2)
    assert np.allclose(fs[0, 2], (5.0, 7.0))


def test_flip_back_regression_is_involution():
    rng = np.random.default_rng(11)
    o = rng.normal(size=(5, 7, 2))
    s = rng.uniform(1, 10, (5, 7, 2))
    fo, fs = flip_back_regression(o, s)
    oo, ss = flip_back_regression(np.asarray(ad.value(fo)),
                                  np.asarray(ad.value(fs)))
    assert np.allclose(np.asarray(ad.value(oo)), o, atol=1e-15)
    assert np.allclose(np.asarray(ad.value(ss)), s, atol=1e-15)


def _mirrored_scene_and_predictions(seed):
    """A random scene (all center x fractions nonzero) plus prediction
    fields on the original view and their exactly mirrored counterparts.
    """
    cfg = GridConfig(64, 64, 4, 2)
    rng = np.random.default_rng(seed)
    boxes = []
    for k in range(3):
        # odd width keeps the center off stride multiples
        w, h = 9.0, float(rng.integers(8, 14))
        x1 = float(rng.integers(2, 50))
        y1 = 4.0 + 16.0 * k
        boxes.append(BBox(x1, y1, x1 + w, y1 + h, int(rng.integers(0, 2))))
    img = rng.uniform(0, 1, (64, 64, 3))
    pair = flip_sample(img, boxes, cfg)

    y = rng.uniform(0.05, 0.95, (16, 16, 2))
    o = rng.uniform(0.1, 0.9, (16, 16, 2))
    s = rng.uniform(4.0, 12.0, (16, 16, 2))
    y_f = np.ascontiguousarray(y[:, ::-1])
    o_f = np.ascontiguousarray(o[:, ::-1]) * np.array([-1.0, 1.0])
    s_f = np.ascontiguousarray(s[:, ::-1])
    return pair, (y, o, s), (y_f, o_f, s_f)


def test_mirrored_predictions_are_a_zero_point():
    for seed in range(5):
        pair, (y, o, s), (y_f, o_f, s_f) = _mirrored_scene_and_predictions(seed)
        mask = np.zeros((16, 16), dtype=bool)
        for p, _ in pair.center_pairs:
            mask[p.j, p.i] = True

        back = np.asarray(ad.value(flip_back_heatmap(y_f)))
        assert abs(float(heatmap_consistency_loss(y, back, mask))) <= 1e-12
        assert abs(float(heatmap_consistency_loss(y, back, mask,
                                                  mode="jsd"))) <= 1e-12
        loc = localization_consistency_loss(o, s, o_f, s_f, pair.center_pairs)
        assert abs(float(loc)) <= 1e-12


def test_dropping_the_negation_breaks_the_zero_point():
    for seed in range(5):
        pair, (_, o, s), (_, _, s_f) = _mirrored_scene_and_predictions(seed)
        # mirror the offsets without negating the x channel: every center
        # with a nonzero horizontal offset now contributes (2 * o_x)^2
        o_nn = np.ascontiguousarray(o[:, ::-1])
        loc = float(localization_consistency_loss(o, s, o_nn, s_f,
                                                  pair.center_pairs))
        floor = min(4.0 * o[p.j, p.i, 0] ** 2 for p, _ in pair.center_pairs)
        assert loc > 0.0
        assert loc >= floor / len(pair.center_pairs) - 1e-12
