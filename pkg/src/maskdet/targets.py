"""Annotation-to-training-target conversion at the prediction stride.

Each object contributes a Gaussian splat on its class channel of the
heatmap (overlaps merge by elementwise max, the exact center cell is 1),
a sub-cell center offset, its pixel size, and membership of the
foreground mask used by the flip-consistency term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import BBox, GridConfig, GridIndex, center_of, project_to_grid

MIN_OVERLAP = 0.7  # displaced boxes must keep at least this IoU with the truth


@dataclass
class TargetPack:
    """Encoded supervision for one image.

    heatmap: (grid_h, grid_w, num_classes) float64, values in [0, 1]
    offsets: per object (GridIndex, (off_x, off_y)) with offsets in [0, 1)
    sizes:   per object (GridIndex, (width, height)) in image pixels
    mask:    (grid_h, grid_w) bool, True on cells any annotated box touches
    """

    heatmap: np.ndarray
    offsets: list[tuple[GridIndex, np.ndarray]]
    sizes: list[tuple[GridIndex, np.ndarray]]
    mask: np.ndarray
    n_objects: int
    classes: list[int] = field(default_factory=list)
    boxes: list[BBox] = field(default_factory=list)


def gaussian_sigma(box_w: float, box_h: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Spread for a box of w x h grid cells: one third of the largest corner
    displacement radius that keeps every displaced-box case at IoU >= min_overlap.

    The three closed-form cases cover a box grown by r per side, shrunk by r
    per side, and translated diagonally by (r, r).
    """
    if box_w <= 0 or box_h <= 0:
        raise ValueError(f"box dims must be positive, got {box_w} x {box_h}")
    if not 0.0 < min_overlap < 1.0:
        raise ValueError(f"min_overlap must be in (0, 1), got {min_overlap}")
    w, h, t = float(box_w), float(box_h), float(min_overlap)

    # grown: wh / ((w+2r)(h+2r)) >= t
    b1 = w + h
    r1 = (-b1 + math.sqrt(b1 * b1 + 4.0 * w * h * (1.0 / t - 1.0))) / 4.0
    # shrunk: (w-2r)(h-2r) / wh >= t
    r2 = (b1 - math.sqrt(b1 * b1 - 4.0 * (1.0 - t) * w * h)) / 4.0
    # shifted by (r, r): (w-r)(h-r) / (2wh - (w-r)(h-r)) >= t
    c3 = w * h * (1.0 - t) / (1.0 + t)
    r3 = (b1 - math.sqrt(b1 * b1 - 4.0 * c3)) / 2.0

    return min(r1, r2, r3) / 3.0


def splat_gaussian(heatmap: np.ndarray, center: GridIndex, class_id: int, sigma: float) -> np.ndarray:
    """Merge exp(-((i-ci)^2 + (j-cj)^2) / (2 sigma^2)) into one class channel.

    Existing values survive wherever they are larger (elementwise max); the
    center cell itself becomes exactly 1.  The heatmap is updated in place
    and returned.
    """
    gh, gw, nc = heatmap.shape
    if not (0 <= center.i < gw and 0 <= center.j < gh):
        raise ValueError(f"center ({center.i}, {center.j}) outside {gw}x{gh} grid")
    if not 0 <= class_id < nc:
        raise ValueError(f"class_id {class_id} outside {nc} channels")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cols = np.arange(gw, dtype=np.float64) - center.i
    rows = np.arange(gh, dtype=np.float64) - center.j
    d2 = rows[:, None] ** 2 + cols[None, :] ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma))
    np.maximum(heatmap[:, :, class_id], patch, out=heatmap[:, :, class_id])
    return heatmap


def encode_targets(
    annotations: Sequence[BBox], cfg: GridConfig, mask_dilation: int = 0
) -> TargetPack:
    """Encode clamped annotations into heatmap / offset / size / mask targets.

    mask_dilation grows the foreground mask by that many cells on every side
    of each box footprint (0 keeps the plain union of box footprints).
    """
    gh, gw = cfg.grid_h, cfg.grid_w
    heat = np.zeros((gh, gw, cfg.num_classes), dtype=np.float64)
    mask = np.zeros((gh, gw), dtype=bool)
    offsets: list[tuple[GridIndex, np.ndarray]] = []
    sizes: list[tuple[GridIndex, np.ndarray]] = []
    classes: list[int] = []
    boxes: list[BBox] = []

    for box in annotations:
        if box.class_id >= cfg.num_classes:
            raise ValueError(
                f"class_id {box.class_id} exceeds configured "
                f"num_classes {cfg.num_classes}"
            )
        if not (0 <= box.x1 and box.x2 <= cfg.width and 0 <= box.y1 and box.y2 <= cfg.height):
            raise ValueError(
                f"box ({box.x1}, {box.y1}, {box.x2}, {box.y2}) not clamped to "
                f"{cfg.width}x{cfg.height} image"
            )
        idx, off = project_to_grid(center_of(box), cfg)
        sigma = gaussian_sigma(box.width / cfg.stride, box.height / cfg.stride)
        splat_gaussian(heat, idx, box.class_id, sigma)
        offsets.append((idx, np.array(off, dtype=np.float64)))
        sizes.append((idx, np.array([box.width, box.height], dtype=np.float64)))
        classes.append(box.class_id)
        boxes.append(box)

        # every cell whose stride-square overlaps the box, optionally dilated
        c0 = max(int(math.floor(box.x1 / cfg.stride)) - mask_dilation, 0)
        c1 = min(int(math.ceil(box.x2 / cfg.stride)) + mask_dilation, gw)
        r0 = max(int(math.floor(box.y1 / cfg.stride)) - mask_dilation, 0)
        r1 = min(int(math.ceil(box.y2 / cfg.stride)) + mask_dilation, gh)
        mask[r0:r1, c0:c1] = True

    return TargetPack(
        heatmap=heat,
        offsets=offsets,
        sizes=sizes,
        mask=mask,
        n_objects=len(offsets),
        classes=classes,
        boxes=boxes,
    )
