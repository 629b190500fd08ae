"""Deterministic synthetic face/mask scenes plus annotation file I/O.

A scene is a soft-colored background with 1..4 schematic faces: a skin
ellipse with two dark eye dots.  A masked face (class 1) additionally has
a palette-colored rectangle over its lower half.  With some probability a
bare face (class 0) instead gets a skin-tone rectangle with the exact mask
footprint, an occluder that keeps the bare-face label and is separable
from real masks only by appearance.

Geometry, appearance, occluder decisions, and pixel noise draw from
independent substreams of the seed, so raising confuser_prob only adds
occluders: every scene keeps identical boxes, classes, and face rendering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .grid import BBox

DEFAULT_PALETTE = (
    (0.25, 0.45, 0.90),   # blue
    (0.95, 0.95, 0.97),   # white
    (0.40, 0.75, 0.45),   # green
    (0.90, 0.55, 0.75),   # pink
)
_SKIN = np.array([0.84, 0.63, 0.50])
_EYE = np.array([0.10, 0.08, 0.08])


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 12.0
    max_size: float = 18.0
    min_separation: float = 12.0   # pairwise center distance, pixels
    confuser_prob: float = 0.3
    mask_palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 0.0 <= self.confuser_prob <= 1.0:
            raise ValueError(f"confuser_prob must be in [0, 1], got {self.confuser_prob}")
        if self.min_size < 4 or self.max_size < self.min_size:
            raise ValueError("need 4 <= min_size <= max_size")
        if self.max_size > min(self.height, self.width) - 4:
            raise ValueError("max_size leaves no room for placement")
        if not self.mask_palette:
            raise ValueError("mask_palette must not be empty")


def _ellipse_mask(h, w, cx, cy, rx, ry):
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _render_scene(spec: SceneSpec, layout_rng, look_rng, conf_rng, noise_rng):
    """One scene image plus its boxes and per-object occluder flags."""
    h, w = spec.height, spec.width
    base = look_rng.uniform(0.08, 0.30) + look_rng.uniform(-0.03, 0.03, size=3)
    img = np.tile(np.clip(base, 0.0, 1.0), (h, w, 1))

    n = int(layout_rng.integers(spec.min_objects, spec.max_objects + 1))
    centers: list[tuple[float, float]] = []
    boxes: list[BBox] = []
    confused: list[bool] = []
    for _ in range(n):
        placed = None
        for _ in range(50):  # bounded rejection sampling, skip on failure
            bw = float(layout_rng.uniform(spec.min_size, spec.max_size))
            bh = float(np.clip(bw * layout_rng.uniform(1.0, 1.25),
                               spec.min_size, spec.max_size))
            cx = float(layout_rng.uniform(bw / 2 + 1, w - bw / 2 - 1))
            cy = float(layout_rng.uniform(bh / 2 + 1, h - bh / 2 - 1))
            if all(math.hypot(cx - px, cy - py) >= spec.min_separation
                   for px, py in centers):
                placed = (cx, cy, bw, bh)
                break
        masked = bool(layout_rng.random() < 0.5)
        # the confuser stream always consumes the same draws so that raising
        # confuser_prob only adds occluders without moving anything else
        conf_draw = float(conf_rng.random())
        blob = np.clip(_SKIN + conf_rng.uniform(-0.10, 0.02, 3), 0.0, 1.0)
        occluded = conf_draw < spec.confuser_prob and not masked
        if placed is None:
            continue
        cx, cy, bw, bh = placed
        centers.append((cx, cy))
        rx, ry = bw / 2, bh / 2

        skin = np.clip(_SKIN + look_rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
        # drawn for every object so stream consumption never depends on flags
        color = np.asarray(spec.mask_palette[
            int(look_rng.integers(0, len(spec.mask_palette)))])
        img[_ellipse_mask(h, w, cx, cy, rx, ry)] = skin
        eye_r = max(1.2, 0.09 * min(bw, bh))
        for side in (-1.0, 1.0):
            img[_ellipse_mask(h, w, cx + side * 0.38 * rx, cy - 0.30 * ry,
                              eye_r, eye_r)] = _EYE

        if masked or occluded:
            # masks and confuser occluders share the same footprint, so the
            # class decision rests on appearance, not geometry
            x0 = int(round(cx - 0.42 * bw))
            x1 = int(round(cx + 0.42 * bw))
            y0 = int(round(cy + 0.02 * bh))
            y1 = int(round(cy + 0.48 * bh))
            img[max(y0, 0):y1, max(x0, 0):x1] = color if masked else blob

        boxes.append(BBox(cx - rx, cy - ry, cx + rx, cy + ry, int(masked)))
        confused.append(occluded)

    img += noise_rng.uniform(-spec.noise, spec.noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img, tuple(boxes), tuple(confused)


def _streams(spec: SceneSpec, index: int):
    make = lambda tag: np.random.default_rng(
        np.random.SeedSequence([spec.seed, index, tag]))
    return make(0), make(1), make(2), make(3)


def generate_dataset(spec: SceneSpec, n_images: int) -> list[tuple[np.ndarray, tuple[BBox, ...]]]:
    """n_images scenes; same spec and count always produce identical output."""
    out = []
    for k in range(n_images):
        img, boxes, _ = _render_scene(spec, *_streams(spec, k))
        out.append((img, boxes))
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_annotations(records: Sequence[tuple[str, Sequence[BBox]]], path) -> None:
    """JSON lines of {"image": name, "boxes": [{x1, y1, x2, y2, class}]}."""
    with open(path, "w") as f:
        for name, boxes in records:
            f.write(json.dumps({
                "image": name,
                "boxes": [
                    {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                     "class": b.class_id}
                    for b in boxes
                ],
            }, sort_keys=True) + "\n")


def read_annotations(path) -> list[tuple[str, list[BBox]]]:
    """Parse an annotation JSONL file; errors carry line numbers and fields."""
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if "image" not in obj or "boxes" not in obj:
                raise ValueError(
                    f"{path}:{lineno}: record needs 'image' and 'boxes' keys"
                )
            boxes = []
            for k, raw in enumerate(obj["boxes"]):
                try:
                    boxes.append(BBox(
                        float(raw["x1"]), float(raw["y1"]),
                        float(raw["x2"]), float(raw["y2"]), int(raw["class"]),
                    ))
                except KeyError as e:
                    raise ValueError(
                        f"{path}:{lineno}: box {k} missing field {e}"
                    ) from e
                except (TypeError, ValueError) as e:
                    raise ValueError(f"{path}:{lineno}: box {k}: {e}") from e
            records.append((str(obj["image"]), boxes))
    return records


def save_image(img: np.ndarray, path) -> None:
    """Lossless 8-bit PNG of a float image in [0, 1]."""
    arr = np.clip(np.asarray(img) * 255.0, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_dataset(dataset: Sequence[tuple[np.ndarray, Sequence[BBox]]], out_dir) -> Path:
    """Save scene PNGs plus annotations.jsonl; returns the annotation path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, (img, boxes) in enumerate(dataset):
        name = f"image_{k:05d}.png"
        save_image(img, out / name)
        records.append((name, boxes))
    ann = out / "annotations.jsonl"
    write_annotations(records, ann)
    return ann


def load_dataset(ann_path) -> list[tuple[np.ndarray, list[BBox]]]:
    """Read annotations.jsonl and its sibling images back into memory."""
    ann_path = Path(ann_path)
    out = []
    for name, boxes in read_annotations(ann_path):
        out.append((load_image(ann_path.parent / name), boxes))
    return out
