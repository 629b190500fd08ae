"""Shared geometry: boxes, keypoints, and stride-grid arithmetic.

Coordinates are continuous image pixels with x rightward, y downward and
the origin at the top-left corner.  A grid cell index pairs ``i`` (cell
along x, i.e. column band) with ``j`` (cell along y), mirroring the
(px, py) component order of keypoints.  Arrays elsewhere in the package
store the grid row-major as [j, i, channel].
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image pixels; class 0 = bare face, 1 = masked."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"BBox.{name} must be finite, got {v!r}")
        if not self.x1 < self.x2:
            raise ValueError(f"BBox requires x1 < x2, got {self.x1} >= {self.x2}")
        if not self.y1 < self.y2:
            raise ValueError(f"BBox requires y1 < y2, got {self.y1} >= {self.y2}")
        if self.class_id not in (0, 1):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id!r}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Keypoint:
    px: float
    py: float


@dataclass(frozen=True)
class GridIndex:
    """Cell index at the prediction stride: i along x, j along y."""

    i: int
    j: int


@dataclass(frozen=True)
class GridConfig:
    """Image extent plus the output stride and class count."""

    height: int = 64
    width: int = 64
    stride: int = 4
    num_classes: int = 2

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.height < self.stride or self.width < self.stride:
            raise ValueError(
                f"image {self.width}x{self.height} smaller than stride {self.stride}"
            )
        if self.height % self.stride or self.width % self.stride:
            raise ValueError(
                f"image dims {self.width}x{self.height} must be divisible by "
                f"stride {self.stride}"
            )

    @property
    def grid_w(self) -> int:
        return self.width // self.stride

    @property
    def grid_h(self) -> int:
        return self.height // self.stride


def center_of(box: BBox) -> Keypoint:
    """Continuous box midpoint (no quantization)."""
    return Keypoint((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)


def project_to_grid(p: Keypoint, cfg: GridConfig) -> tuple[GridIndex, tuple[float, float]]:
    """Split an in-bounds keypoint into its stride cell and fractional offset.

    Returns (GridIndex, (off_x, off_y)) with both offsets in [0, 1).  For a
    power-of-two stride the decomposition is exact: grid_to_image inverts it
    bit-for-bit.
    """
    if not (0.0 <= p.px < cfg.width and 0.0 <= p.py < cfg.height):
        raise ValueError(
            f"keypoint ({p.px}, {p.py}) outside image "
            f"[0, {cfg.width}) x [0, {cfg.height})"
        )
    qx = p.px / cfg.stride
    qy = p.py / cfg.stride
    i = math.floor(qx)
    j = math.floor(qy)
    return GridIndex(i, j), (qx - i, qy - j)


def grid_to_image(idx: GridIndex, offset: tuple[float, float], cfg: GridConfig) -> Keypoint:
    """Inverse of project_to_grid: continuous pixel location of cell + offset."""
    if not (0 <= idx.i < cfg.grid_w and 0 <= idx.j < cfg.grid_h):
        raise ValueError(
            f"grid index ({idx.i}, {idx.j}) outside {cfg.grid_w}x{cfg.grid_h} grid"
        )
    ox, oy = offset
    if not (0.0 <= ox < 1.0 and 0.0 <= oy < 1.0):
        raise ValueError(f"offset components must lie in [0, 1), got {offset}")
    return Keypoint((idx.i + ox) * cfg.stride, (idx.j + oy) * cfg.stride)


def clamp_box(box: BBox, cfg: GridConfig) -> BBox | None:
    """Clip a box to image bounds; None when nothing remains."""
    x1 = min(max(box.x1, 0.0), float(cfg.width))
    x2 = min(max(box.x2, 0.0), float(cfg.width))
    y1 = min(max(box.y1, 0.0), float(cfg.height))
    y2 = min(max(box.y2, 0.0), float(cfg.height))
    if x1 >= x2 or y1 >= y2:
        return None
    return BBox(x1, y1, x2, y2, box.class_id)
