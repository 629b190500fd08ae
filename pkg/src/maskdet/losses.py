"""Training objective: focal heatmap term, center regression, an online-mined
triplet term over box-pooled embeddings, and the two flip-consistency terms.

Every loss accepts either autodiff Tensors (producing a scalar Tensor on the
active tape) or plain numpy arrays (producing a float), so each one can be
exercised as a pure forward function and finite-difference checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .grid import GridIndex
from .targets import TargetPack

_EPS = 1e-6  # probability clamp for logs

REGRESSION_MODES = ("l1", "smoothl1")
CONSISTENCY_MODES = ("l2", "jsd")


@dataclass(frozen=True)
class LossWeights:
    """Weights and shape parameters of the combined objective."""

    lambda_pix: float = 1.0
    lambda_off: float = 1.0
    lambda_size: float = 0.01
    lambda_triplet: float = 1.0
    lambda_consistency: float = 100.0
    alpha: float = 2.0
    beta: float = 4.0
    margin: float = 0.3
    regression_mode: str = "l1"
    smooth_l1_threshold: float = 1.0

    def __post_init__(self):
        for name in (
            "lambda_pix", "lambda_off", "lambda_size",
            "lambda_triplet", "lambda_consistency", "alpha", "beta",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.regression_mode not in REGRESSION_MODES:
            raise ValueError(
                f"regression_mode must be one of {REGRESSION_MODES}, "
                f"got {self.regression_mode!r}"
            )
        if self.smooth_l1_threshold <= 0:
            raise ValueError(
                f"smooth_l1_threshold must be > 0, got {self.smooth_l1_threshold}"
            )


@dataclass
class TripletBatch:
    """Parallel anchor / positive / negative embedding sequences."""

    anchors: list
    positives: list
    negatives: list

    def __len__(self):
        return len(self.anchors)

    def validate(self, tol: float = 1e-9) -> None:
        """Check equal lengths and unit L2 norm of every member vector."""
        if not (len(self.anchors) == len(self.positives) == len(self.negatives)):
            raise ValueError(
                f"triplet sequences differ in length: {len(self.anchors)}, "
                f"{len(self.positives)}, {len(self.negatives)}"
            )
        for role, seq in (
            ("anchor", self.anchors),
            ("positive", self.positives),
            ("negative", self.negatives),
        ):
            for k, v in enumerate(seq):
                n = float(np.linalg.norm(ad.value(v)))
                if abs(n - 1.0) > tol:
                    raise ValueError(f"{role}[{k}] has L2 norm {n}, expected 1")


def heatmap_focal_loss(y_hat, y, n_objects: int, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced pixelwise focal loss over the class heatmaps.

    Cells where the target is exactly 1 use (1-p)^alpha log p; all other
    cells use (1-y)^beta p^alpha log(1-p).  The sum is normalized by
    max(n_objects, 1).
    """
    ya = np.asarray(ad.value(y), dtype=np.float64)
    if ad.value(y_hat).shape != ya.shape:
        raise ValueError(
            f"prediction shape {ad.value(y_hat).shape} != target shape {ya.shape}"
        )
    p = ad.clip(y_hat, _EPS, 1.0 - _EPS)
    pos = (ya == 1.0).astype(np.float64)
    pos_term = pos * (1.0 - p) ** alpha * ad.log(p)
    neg_term = ((1.0 - ya) ** beta * (1.0 - pos)) * p ** alpha * ad.log(1.0 - p)
    total = ad.sum(pos_term) + ad.sum(neg_term)
    return -total / float(max(n_objects, 1))


def _regression_penalty(err, mode: str, threshold: float):
    if mode == "l1":
        return ad.absolute(err)
    # smooth L1: quadratic inside |e| < threshold, linear outside
    quad = (np.abs(ad.value(err)) < threshold).astype(np.float64)
    sq = 0.5 * err * err / threshold
    lin = ad.absolute(err) - 0.5 * threshold
    return quad * sq + (1.0 - quad) * lin


def _gather_center_values(field_arr, centers: Sequence[GridIndex]):
    gh, gw = ad.value(field_arr).shape[:2]
    rows, cols = [], []
    for g in centers:
        if not (0 <= g.i < gw and 0 <= g.j < gh):
            raise ValueError(f"center ({g.i}, {g.j}) outside {gw}x{gh} field")
        rows.append(g.j)
        cols.append(g.i)
    return field_arr[(np.array(rows), np.array(cols))]


def _center_regression_loss(field_arr, targets, n_objects, mode, threshold):
    if mode not in REGRESSION_MODES:
        raise ValueError(f"unknown regression mode {mode!r}")
    if not targets:
        return 0.0
    pred = _gather_center_values(field_arr, [g for g, _ in targets])
    truth = np.stack([np.asarray(v, dtype=np.float64) for _, v in targets])
    per = _regression_penalty(pred - truth, mode, threshold)
    return ad.sum(per) / float(max(n_objects, 1))


def offset_loss(o_hat, targets, n_objects: int, mode: str = "l1", threshold: float = 1.0):
    """Center-cell offset regression, both components, averaged over objects.

    o_hat: (grid_h, grid_w, 2) with channel 0 = x fraction, 1 = y fraction.
    targets: sequence of (GridIndex, (off_x, off_y)).
    """
    return _center_regression_loss(o_hat, targets, n_objects, mode, threshold)


def size_loss(s_hat, targets, n_objects: int, mode: str = "l1", threshold: float = 1.0):
    """Center-cell size regression in image pixels (channel 0 = w, 1 = h)."""
    return _center_regression_loss(s_hat, targets, n_objects, mode, threshold)


def center_loss(pix, off, size, w: LossWeights):
    """Weighted sum of the three center-prediction terms."""
    return w.lambda_pix * pix + w.lambda_off * off + w.lambda_size * size


def triplet_loss(batch: TripletBatch, margin: float = 0.3):
    """Hinged triplet ranking loss, summed over the batch.

    Each term is max(0, ||a-p||^2 - ||a-n||^2 + margin) on embedding
    vectors; identical anchor/positive/negative collapse to the margin.
    """
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    if len(batch.anchors) != len(batch.positives) or len(batch.anchors) != len(batch.negatives):
        raise ValueError("triplet sequences must have equal length")
    total = 0.0
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        dp = a - p
        dn = a - n
        total = total + ad.relu(ad.sum(dp * dp) - ad.sum(dn * dn) + margin)
    return total


def _pool_box(embed_field, r0, r1, c0, c1):
    region = embed_field[(slice(r0, r1), slice(c0, c1))] if isinstance(embed_field, ad.Tensor) \
        else embed_field[r0:r1, c0:c1]
    v = ad.sum(region, axis=(0, 1)) / float((r1 - r0) * (c1 - c0))
    return _unit(v)


def _unit(v):
    n2 = ad.sum(v * v)
    n2 = ad.clip(n2, 1e-60, np.inf)
    return v / ad.sqrt(n2)


def _grid_rect(x1, y1, x2, y2, stride, gh, gw):
    c0 = min(max(int(np.floor(x1 / stride)), 0), gw - 1)
    c1 = max(min(int(np.ceil(x2 / stride)), gw), c0 + 1)
    r0 = min(max(int(np.floor(y1 / stride)), 0), gh - 1)
    r1 = max(min(int(np.ceil(y2 / stride)), gh), r0 + 1)
    return r0, r1, c0, c1


def mine_triplets(embed_field, targets: TargetPack, stride: int, rng_seed: int) -> TripletBatch:
    """Build one triplet per annotated object from a per-cell embedding field.

    Anchors pool the object's own box footprint (mean over cells, then unit
    normalized).  Positives prefer another object of the same class, falling
    back to a re-pool of the same box jittered by up to 10% of its size.
    Negatives prefer an opposite-class object, falling back to a pooled
    random background rectangle (cells outside every box footprint).
    Selection depends only on rng_seed and the targets, never on embedding
    values, so the choice pattern is reproducible and differentiable.
    """
    gh, gw = ad.value(embed_field).shape[:2]
    rng = np.random.default_rng(rng_seed)
    boxes = targets.boxes
    if len(boxes) != targets.n_objects:
        raise ValueError("targets must carry one box per object")
    if not boxes:
        return TripletBatch([], [], [])

    rects = [_grid_rect(b.x1, b.y1, b.x2, b.y2, stride, gh, gw) for b in boxes]
    pools = [_pool_box(embed_field, *r) for r in rects]
    bg_free = ~targets.mask

    anchors, positives, negatives = [], [], []
    for k, box in enumerate(boxes):
        anchors.append(pools[k])

        same = [m for m in range(len(boxes)) if m != k and boxes[m].class_id == box.class_id]
        if same:
            positives.append(pools[int(rng.choice(same))])
        else:
            jx = rng.uniform(-0.1, 0.1) * box.width
            jy = rng.uniform(-0.1, 0.1) * box.height
            positives.append(
                _pool_box(
                    embed_field,
                    *_grid_rect(box.x1 + jx, box.y1 + jy, box.x2 + jx, box.y2 + jy,
                                stride, gh, gw),
                )
            )

        other = [m for m in range(len(boxes)) if boxes[m].class_id != box.class_id]
        if other:
            negatives.append(pools[int(rng.choice(other))])
        else:
            negatives.append(_background_pool(embed_field, bg_free, rects[k], rng))

    return TripletBatch(anchors, positives, negatives)


def _background_pool(embed_field, bg_free, rect, rng):
    gh, gw = bg_free.shape
    r0, r1, c0, c1 = rect
    rh, rw = r1 - r0, c1 - c0
    for _ in range(32):
        if gh - rh <= 0 or gw - rw <= 0:
            break
        rr = int(rng.integers(0, gh - rh + 1))
        cc = int(rng.integers(0, gw - rw + 1))
        if bg_free[rr:rr + rh, cc:cc + rw].all():
            return _pool_box(embed_field, rr, rr + rh, cc, cc + rw)
    # fall back to pooling every background cell (or the whole field if none)
    if bg_free.any():
        sel = embed_field[bg_free]
        v = ad.sum(sel, axis=0) / float(int(bg_free.sum()))
        return _unit(v)
    return _pool_box(embed_field, 0, gh, 0, gw)


def heatmap_consistency_loss(y_hat, y_hat_flipback, mask, n_mask: int | None = None,
                             mode: str = "l2"):
    """Agreement between the two passes' heatmaps on foreground cells.

    "l2" averages the squared per-class differences over mask cells; "jsd"
    averages the per-cell per-class Bernoulli Jensen-Shannon divergence over
    mask cells and classes.  Symmetric in the two predictions.
    """
    if mode not in CONSISTENCY_MODES:
        raise ValueError(f"unknown consistency mode {mode!r}")
    a_shape = ad.value(y_hat).shape
    if a_shape != ad.value(y_hat_flipback).shape:
        raise ValueError("the two heatmaps must share a shape")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a_shape[:2]:
        raise ValueError(f"mask shape {m.shape} != heatmap spatial {a_shape[:2]}")
    count = int(m.sum()) if n_mask is None else int(n_mask)
    if count <= 0:
        return 0.0
    mw = m[:, :, None]

    if mode == "l2":
        d = y_hat - y_hat_flipback
        return ad.sum(d * d * mw) / float(count)

    p = ad.clip(y_hat, _EPS, 1.0 - _EPS)
    q = ad.clip(y_hat_flipback, _EPS, 1.0 - _EPS)
    mid = 0.5 * (p + q)
    kl_p = p * ad.log(p / mid) + (1.0 - p) * ad.log((1.0 - p) / (1.0 - mid))
    kl_q = q * ad.log(q / mid) + (1.0 - q) * ad.log((1.0 - q) / (1.0 - mid))
    jsd = 0.5 * (kl_p + kl_q)
    return ad.sum(jsd * mw) / float(count * a_shape[2])


def localization_consistency_loss(o_hat, s_hat, o_hat_flip, s_hat_flip,
                                  center_pairs: Sequence[tuple[GridIndex, GridIndex]]):
    """Offset/size agreement across the flip, averaged over center pairs.

    The flipped pass's horizontal offset is compared against the negation of
    the original (mirroring flips the sub-cell x direction); vertical offset
    and both size components are compared directly.
    """
    if not center_pairs:
        return 0.0
    o_orig = _gather_center_values(o_hat, [p for p, _ in center_pairs])
    o_flip = _gather_center_values(o_hat_flip, [q for _, q in center_pairs])
    s_orig = _gather_center_values(s_hat, [p for p, _ in center_pairs])
    s_flip = _gather_center_values(s_hat_flip, [q for _, q in center_pairs])

    sign = np.array([-1.0, 1.0])
    d_off = o_orig - sign * o_flip
    d_size = s_orig - s_flip
    total = ad.sum(d_off * d_off) + ad.sum(d_size * d_size)
    return total / float(len(center_pairs))


def total_loss(center, triplet, consistency, w: LossWeights):
    """Full objective: center + lambda_tri * triplet + lambda_con * consistency."""
    return center + w.lambda_triplet * triplet + w.lambda_consistency * consistency
