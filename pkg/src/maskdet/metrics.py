"""Detection quality: IoU, greedy per-class matching, precision/recall."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .decode import Detection
from .grid import BBox


@dataclass
class EvalReport:
    """Per-class match counts and the derived precision/recall."""

    iou_threshold: float
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)

    def f1(self, class_id: int) -> float:
        p, r = self.precision[class_id], self.recall[class_id]
        return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes (classes ignored)."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_detections(
    detections: Sequence[Detection],
    groundtruth: Sequence[BBox],
    iou_threshold: float = 0.5,
    num_classes: int = 2,
) -> dict[int, tuple[int, int, int]]:
    """Greedy one-to-one matching within each class.

    Detections are visited in descending score order (ties keep input
    order); each claims the unmatched same-class groundtruth with the
    highest IoU if that IoU clears the threshold.  Returns per-class
    (tp, fp, fn).  A detection never matches across classes.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    counts = {}
    for c in range(num_classes):
        dets = [d for d in detections if d.box.class_id == c]
        dets.sort(key=lambda d: -d.score)  # stable: preserves input order on ties
        gts = [g for g in groundtruth if g.class_id == c]
        claimed = [False] * len(gts)
        tp = fp = 0
        for det in dets:
            best, best_iou = -1, 0.0
            for gi, gt in enumerate(gts):
                if claimed[gi]:
                    continue
                v = iou(det.box, gt)
                if v > best_iou:
                    best, best_iou = gi, v
            if best >= 0 and best_iou >= iou_threshold:
                claimed[best] = True
                tp += 1
            else:
                fp += 1
        counts[c] = (tp, fp, len(gts) - tp)
    return counts


def precision_recall(
    counts: dict[int, tuple[int, int, int]], iou_threshold: float = 0.5
) -> EvalReport:
    """Fold match counts into precision/recall; empty ratios (0/0) count as 1."""
    report = EvalReport(iou_threshold=iou_threshold)
    for c, (tp, fp, fn) in sorted(counts.items()):
        report.tp[c], report.fp[c], report.fn[c] = tp, fp, fn
        report.precision[c] = 1.0 if tp + fp == 0 else tp / (tp + fp)
        report.recall[c] = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return report


def accumulate_counts(
    per_image: Sequence[dict[int, tuple[int, int, int]]], num_classes: int = 2
) -> dict[int, tuple[int, int, int]]:
    """Sum per-image match counts into dataset totals."""
    totals = {c: (0, 0, 0) for c in range(num_classes)}
    for counts in per_image:
        for c, (tp, fp, fn) in counts.items():
            t0, f0, n0 = totals.get(c, (0, 0, 0))
            totals[c] = (t0 + tp, f0 + fp, n0 + fn)
    return totals


def evaluate_frames(
    frames: Sequence[tuple[Sequence[Detection], Sequence[BBox]]],
    iou_threshold: float = 0.5,
    num_classes: int = 2,
) -> EvalReport:
    """Match every (detections, groundtruth) frame and report dataset totals."""
    counts = accumulate_counts(
        [match_detections(d, g, iou_threshold, num_classes) for d, g in frames],
        num_classes,
    )
    return precision_recall(counts, iou_threshold)
