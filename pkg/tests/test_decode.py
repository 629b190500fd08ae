"""Peak extraction against a brute-force neighborhood oracle, decode box
arithmetic, and exact encode -> decode round trips.
"""

import numpy as np
import pytest

from maskdet import BBox, GridConfig, encode_targets
from maskdet.decode import (
    DecodeConfig,
    PredictionPack,
    decode,
    peak_extract,
    targets_to_predictions,
)
from maskdet.metrics import iou


def brute_force_peaks(y, threshold, window):
    """Reference extraction: scan every cell, compare against its in-bounds
    window on the same class channel, apply the threshold, sort the same way.
    """
    gh, gw, nc = y.shape
    half = window // 2
    out = []
    for ch in range(nc):
        for r in range(gh):
            for c in range(gw):
                v = y[r, c, ch]
                if v < threshold:
                    continue
                r0, r1 = max(r - half, 0), min(r + half + 1, gh)
                c0, c1 = max(c - half, 0), min(c + half + 1, gw)
                if v >= y[r0:r1, c0:c1, ch].max():
                    out.append((r, c, ch, v))
    out.sort(key=lambda t: (-t[3], t[2], t[1], t[0]))
    return out


@pytest.mark.parametrize("window", [3, 5])
def test_peak_extract_matches_brute_force(window):
    cfg = DecodeConfig(score_threshold=0.3, top_k=10_000, peak_window=window)
    for seed in range(8):
        rng = np.random.default_rng(seed)
        if seed % 2 == 0:
            y = rng.uniform(0, 1, (11, 13, 2))
        else:
            # quantized values force plateaus and score ties
            y = rng.integers(0, 5, (11, 13, 2)) / 4.0
        got = [(g.j, g.i, ch, s) for g, ch, s in peak_extract(y, cfg)]
        assert got == brute_force_peaks(y, 0.3, window)


def test_peak_tie_break_order():
    y = np.zeros((8, 8, 2))
    y[5, 2, 1] = 0.9
    y[1, 7, 0] = 0.9
    y[6, 6, 0] = 0.9
    y[1, 1, 0] = 0.95
    cfg = DecodeConfig(score_threshold=0.5, top_k=10)
    got = [(s, ch, g.i, g.j) for g, ch, s in peak_extract(y, cfg)]
    # highest score first, then class, then i, then j among the 0.9 ties
    assert got == [
        (0.95, 0, 1, 1),
        (0.9, 0, 6, 6),
        (0.9, 0, 7, 1),
        (0.9, 1, 2, 5),
    ]


def test_peak_top_k_and_threshold():
    y = np.zeros((6, 20, 1))
    for k in range(6):
        y[k, 3 * k, 0] = 0.4 + 0.1 * k
    cfg = DecodeConfig(score_threshold=0.45, top_k=3)
    got = peak_extract(y, cfg)
    assert [round(s, 10) for _, _, s in got] == [0.9, 0.8, 0.7]


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(score_threshold=1.5)
    with pytest.raises(ValueError):
        DecodeConfig(top_k=0)
    with pytest.raises(ValueError):
        DecodeConfig(peak_window=4)


def test_decode_box_arithmetic_hand_case():
    grid = GridConfig(64, 64, 4, 2)
    heat = np.zeros((16, 16, 2))
    heat[1, 2, 1] = 0.7
    offsets = np.zeros((16, 16, 2))
    sizes = np.zeros((16, 16, 2))
    offsets[1, 2] = (0.5, 0.25)
    sizes[1, 2] = (8.0, 6.0)
    dets = decode(PredictionPack(heat, offsets, sizes), DecodeConfig(), grid)
    assert len(dets) == 1
    d = dets[0]
    assert d.score == pytest.approx(0.7)
    assert d.box.class_id == 1
    # center (10, 5): x = (2 + 0.5) * 4, y = (1 + 0.25) * 4
    assert (d.box.x1, d.box.y1, d.box.x2, d.box.y2) == (6.0, 2.0, 14.0, 8.0)


def test_decode_clamps_and_drops_degenerate():
    grid = GridConfig(64, 64, 4, 2)
    heat = np.zeros((16, 16, 2))
    heat[0, 0, 0] = 0.9
    heat[8, 8, 0] = 0.9
    offsets = np.zeros((16, 16, 2))
    sizes = np.zeros((16, 16, 2))
    sizes[0, 0] = (30.0, 30.0)   # spills past the top-left corner
    sizes[8, 8] = (0.0, 10.0)    # zero width collapses after clamping
    dets = decode(PredictionPack(heat, offsets, sizes), DecodeConfig(), grid)
    assert len(dets) == 1
    b = dets[0].box
    assert (b.x1, b.y1) == (0.0, 0.0)
    assert (b.x2, b.y2) == (15.0, 15.0)


def _random_scene(rng, grid, min_sep):
    boxes = []
    tries = 0
    while len(boxes) < 4 and tries < 200:
        tries += 1
        w = float(rng.uniform(8, 18))
        h = float(rng.uniform(8, 18))
        x1 = float(rng.uniform(0, grid.width - w))
        y1 = float(rng.uniform(0, grid.height - h))
        cx, cy = x1 + w / 2, y1 + h / 2
        ok = all(
            np.hypot(cx - (b.x1 + b.x2) / 2, cy - (b.y1 + b.y2) / 2) >= min_sep
            for b in boxes
        )
        if ok:
            boxes.append(BBox(x1, y1, x1 + w, y1 + h, int(rng.integers(0, 2))))
    return boxes


def test_encode_decode_round_trip_is_exact():
    grid = GridConfig(96, 96, 4, 2)
    dcfg = DecodeConfig(score_threshold=0.3, top_k=100)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        boxes = _random_scene(rng, grid, min_sep=3 * grid.stride)
        pack = encode_targets(boxes, grid)
        dets = decode(targets_to_predictions(pack, grid), dcfg, grid)
        assert len(dets) == len(boxes)
        for b in boxes:
            best = max(iou(b, d.box) for d in dets
                       if d.box.class_id == b.class_id)
            assert best >= 1.0 - 1e-9


def test_targets_to_predictions_embeddings_are_unit_norm():
    grid = GridConfig(64, 64, 4, 2)
    pack = encode_targets([BBox(10, 10, 26, 26, 0)], grid)
    pred = targets_to_predictions(pack, grid, embed_dim=8)
    norms = np.linalg.norm(pred.embeddings, axis=2)
    assert np.allclose(norms, 1.0)
