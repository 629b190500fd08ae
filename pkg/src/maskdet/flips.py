"""Horizontal-flip geometry for the two-pass consistency objective.

A flipped sample mirrors the image columns and reflects each box through
the vertical midline (x1' = W - x2, x2' = W - x1).  Center correspondences
pair each object's grid projection in the original image with the grid
projection of its own flipped center; when the center's fractional x
offset is nonzero that lands on the mirror cell W' - 1 - i, but a center
sitting exactly on a stride multiple shifts one cell (floor quantization
is not symmetric), which is why the pairing is computed from the flipped
annotation rather than by mirroring indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .grid import BBox, GridConfig, GridIndex, center_of, project_to_grid

# channel signs for offset fields under flip-back: x negated, y kept
_OFFSET_SIGNS = np.array([-1.0, 1.0])


@dataclass
class FlipPair:
    """An image/annotation sample together with its mirrored twin."""

    image: np.ndarray
    boxes: tuple[BBox, ...]
    flipped_image: np.ndarray
    flipped_boxes: tuple[BBox, ...]
    center_pairs: tuple[tuple[GridIndex, GridIndex], ...]


def flip_box(box: BBox, width: float) -> BBox:
    """Reflect a box through the vertical midline of a width-wide image."""
    return BBox(width - box.x2, box.y1, width - box.x1, box.y2, box.class_id)


def flip_sample(image: np.ndarray, boxes: Sequence[BBox], cfg: GridConfig) -> FlipPair:
    """Mirror an image and its annotations; record center correspondences."""
    if image.shape[0] != cfg.height or image.shape[1] != cfg.width:
        raise ValueError(
            f"image shape {image.shape[:2]} != configured "
            f"{cfg.height}x{cfg.width}"
        )
    flipped = np.ascontiguousarray(image[:, ::-1])
    fboxes = tuple(flip_box(b, cfg.width) for b in boxes)
    pairs = []
    for b, fb in zip(boxes, fboxes):
        orig_idx, _ = project_to_grid(center_of(b), cfg)
        flip_idx, _ = project_to_grid(center_of(fb), cfg)
        pairs.append((orig_idx, flip_idx))
    return FlipPair(
        image=image,
        boxes=tuple(boxes),
        flipped_image=flipped,
        flipped_boxes=fboxes,
        center_pairs=tuple(pairs),
    )


def flip_back_heatmap(y_hat):
    """Mirror a (gh, gw, C) heatmap's columns back into original orientation."""
    return ad.flip_cols(y_hat)


def flip_back_regression(o_hat, s_hat):
    """Mirror offset/size fields back, negating the horizontal offset channel.

    Applying the transform twice returns the original fields (involution).
    """
    return ad.flip_cols(o_hat) * _OFFSET_SIGNS, ad.flip_cols(s_hat)
