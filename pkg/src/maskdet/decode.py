"""Heatmap peak extraction and detection decoding (no box NMS).

A cell is a peak when it attains the maximum of its peak_window x
peak_window neighborhood on its own class channel and clears the score
threshold.  Peaks order by descending score with deterministic
(class, i, j) tie-breaking, truncate to top_k, and decode to boxes via the
center offset and size fields at the peak cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .grid import BBox, GridConfig, GridIndex
from .targets import TargetPack


@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.3
    top_k: int = 100
    peak_window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(
                f"score_threshold must be in [0, 1], got {self.score_threshold}"
            )
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.peak_window < 1 or self.peak_window % 2 == 0:
            raise ValueError(
                f"peak_window must be odd and >= 1, got {self.peak_window}"
            )


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float


@dataclass
class PredictionPack:
    """Per-cell network outputs at the prediction stride.

    heatmap:    (gh, gw, num_classes), per-class center scores in [0, 1]
    offsets:    (gh, gw, 2), sub-cell center fractions (x, y)
    sizes:      (gh, gw, 2), box extents in image pixels (w, h)
    embeddings: (gh, gw, d) unit-norm per cell, or None outside training
    """

    heatmap: object
    offsets: object
    sizes: object
    embeddings: object = None

    def detached(self) -> "PredictionPack":
        """Copy with plain numpy arrays (drops any autodiff linkage)."""
        return PredictionPack(
            heatmap=np.array(ad.value(self.heatmap)),
            offsets=np.array(ad.value(self.offsets)),
            sizes=np.array(ad.value(self.sizes)),
            embeddings=None if self.embeddings is None
            else np.array(ad.value(self.embeddings)),
        )


def peak_extract(heatmap: np.ndarray, cfg: DecodeConfig) -> list[tuple[GridIndex, int, float]]:
    """All qualifying peaks as (GridIndex, class_id, score), ordered by
    descending score then (class, i, j)."""
    y = np.asarray(ad.value(heatmap), dtype=np.float64)
    if y.ndim != 3:
        raise ValueError(f"heatmap must be (gh, gw, C), got shape {y.shape}")
    gh, gw, nc = y.shape
    k = cfg.peak_window
    pad = k // 2
    padded = np.pad(y, ((pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    local_max = windows.max(axis=(-2, -1))
    is_peak = (y >= local_max) & (y >= cfg.score_threshold)

    found = [
        (GridIndex(int(c), int(r)), int(ch), float(y[r, c, ch]))
        for r, c, ch in zip(*np.nonzero(is_peak))
    ]
    found.sort(key=lambda t: (-t[2], t[1], t[0].i, t[0].j))
    return found[: cfg.top_k]


def decode(pred: PredictionPack, cfg: DecodeConfig, grid: GridConfig) -> list[Detection]:
    """Turn peaks into clamped boxes: center = (cell + offset) * stride,
    extent from the size field at the peak cell."""
    offsets = np.asarray(ad.value(pred.offsets), dtype=np.float64)
    sizes = np.asarray(ad.value(pred.sizes), dtype=np.float64)
    dets: list[Detection] = []
    for idx, class_id, score in peak_extract(pred.heatmap, cfg):
        ox, oy = offsets[idx.j, idx.i]
        w, h = sizes[idx.j, idx.i]
        cx = (idx.i + ox) * grid.stride
        cy = (idx.j + oy) * grid.stride
        x1 = min(max(cx - w / 2.0, 0.0), float(grid.width))
        x2 = min(max(cx + w / 2.0, 0.0), float(grid.width))
        y1 = min(max(cy - h / 2.0, 0.0), float(grid.height))
        y2 = min(max(cy + h / 2.0, 0.0), float(grid.height))
        if x1 >= x2 or y1 >= y2:
            continue  # clamping swallowed the whole box
        dets.append(Detection(BBox(x1, y1, x2, y2, class_id), score))
    return dets


def targets_to_predictions(pack: TargetPack, grid: GridConfig,
                           embed_dim: Optional[int] = None) -> PredictionPack:
    """Ideal predictions from encoded targets: the exact heatmap, and offset
    and size fields populated at the groundtruth center cells (zero elsewhere)."""
    gh, gw = pack.heatmap.shape[:2]
    offsets = np.zeros((gh, gw, 2), dtype=np.float64)
    sizes = np.zeros((gh, gw, 2), dtype=np.float64)
    for (idx, off), (_, size) in zip(pack.offsets, pack.sizes):
        offsets[idx.j, idx.i] = off
        sizes[idx.j, idx.i] = size
    embeddings = None
    if embed_dim is not None:
        embeddings = np.full((gh, gw, embed_dim), 1.0 / np.sqrt(embed_dim))
    return PredictionPack(pack.heatmap.copy(), offsets, sizes, embeddings)
