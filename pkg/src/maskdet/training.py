"""Two-pass training: every sampled image contributes its own center loss,
a triplet term mined from its embedding field, and consistency terms that
tie its predictions to those of its horizontally flipped twin.

Runs are bitwise deterministic in the configured seed: batch sampling,
parameter init, and triplet mining draw from independent named substreams.
The returned parameters are the snapshot with the smallest recorded total
loss, not necessarily the final iterate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .flips import FlipPair, flip_back_heatmap, flip_sample
from .grid import BBox, GridConfig
from .losses import (
    LossWeights,
    center_loss,
    heatmap_consistency_loss,
    heatmap_focal_loss,
    localization_consistency_loss,
    mine_triplets,
    offset_loss,
    size_loss,
    total_loss,
    triplet_loss,
)
from .network import DetectorNet, NetConfig
from .targets import TargetPack, encode_targets

LOSS_KEYS = (
    "pix", "offset", "size", "center",
    "triplet", "consistency_cls", "consistency_loc", "consistency", "total",
)


class TrainingDivergedError(RuntimeError):
    """Raised when any loss component stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    consistency_warmup ramps the consistency weight linearly from 0 to its
    configured value over the first fraction of iterations.  A fresh network
    is nowhere near flip-equivariant, so applying the full weight from step
    one rewards constant (trivially view-consistent) regression outputs and
    the size head never learns scale.  Ramping lets localization form first;
    after the warmup the combined objective is used unchanged.
    """

    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 2e-3
    lr_drop_at: tuple[float, ...] = (0.4, 0.8)  # fractions of total iterations
    seed: int = 0
    enable_triplet: bool = True
    enable_consistency: bool = True
    center_loss_on_flip: bool = True
    consistency_mode: str = "l2"
    consistency_warmup: float = 0.3  # fraction of iterations, 0 disables
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for f in self.lr_drop_at:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"lr drop fractions must be in (0, 1], got {f}")
        if not 0.0 <= self.consistency_warmup <= 1.0:
            raise ValueError(
                f"consistency_warmup must be in [0, 1], got {self.consistency_warmup}"
            )


@dataclass
class Sample:
    """One dataset item with everything precomputed for the two passes."""

    image: np.ndarray
    boxes: tuple[BBox, ...]
    pack: TargetPack
    flip: FlipPair
    flipped_pack: TargetPack


@dataclass
class TrainResult:
    net: DetectorNet
    history: list[dict]
    best_iteration: int
    best_loss: float
    optimizer_state: dict = field(default_factory=dict)


class Adam:
    """Standard bias-corrected Adam on the parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.ravel().tolist() for k, v in self.m.items()},
            "v": {k: v.ravel().tolist() for k, v in self.v.items()},
        }


def prepare_samples(dataset: Sequence[tuple[np.ndarray, Sequence[BBox]]],
                    grid: GridConfig) -> list[Sample]:
    """Encode targets and flip twins once; training iterations reuse them."""
    samples = []
    for image, boxes in dataset:
        pack = encode_targets(boxes, grid)
        flip = flip_sample(np.asarray(image, dtype=np.float64), boxes, grid)
        fpack = encode_targets(flip.flipped_boxes, grid)
        samples.append(Sample(flip.image, tuple(boxes), pack, flip, fpack))
    return samples


def _mining_seed(base_seed: int, iteration: int, slot: int) -> int:
    return int(np.random.SeedSequence([base_seed, iteration, slot]).generate_state(1)[0])


def _image_losses(sample: Sample, net: DetectorNet, w: LossWeights,
                  cfg: TrainConfig, grid: GridConfig, mining_seed: int) -> dict:
    pred = net.forward(sample.image)
    pred_f = net.forward(sample.flip.flipped_image)
    pack, fpack = sample.pack, sample.flipped_pack

    pix = heatmap_focal_loss(pred.heatmap, pack.heatmap, pack.n_objects, w.alpha, w.beta)
    off = offset_loss(pred.offsets, pack.offsets, pack.n_objects,
                      w.regression_mode, w.smooth_l1_threshold)
    size = size_loss(pred.sizes, pack.sizes, pack.n_objects,
                     w.regression_mode, w.smooth_l1_threshold)
    if cfg.center_loss_on_flip:
        pix_f = heatmap_focal_loss(pred_f.heatmap, fpack.heatmap, fpack.n_objects,
                                   w.alpha, w.beta)
        off_f = offset_loss(pred_f.offsets, fpack.offsets, fpack.n_objects,
                            w.regression_mode, w.smooth_l1_threshold)
        size_f = size_loss(pred_f.sizes, fpack.sizes, fpack.n_objects,
                           w.regression_mode, w.smooth_l1_threshold)
        pix = 0.5 * (pix + pix_f)
        off = 0.5 * (off + off_f)
        size = 0.5 * (size + size_f)
    center = center_loss(pix, off, size, w)

    tri = 0.0
    if cfg.enable_triplet and pack.n_objects > 0:
        batch = mine_triplets(pred.embeddings, pack, grid.stride, mining_seed)
        tri = triplet_loss(batch, w.margin)

    con_c = 0.0
    con_l = 0.0
    if cfg.enable_consistency:
        con_c = heatmap_consistency_loss(
            pred.heatmap, flip_back_heatmap(pred_f.heatmap), pack.mask,
            mode=cfg.consistency_mode,
        )
        con_l = localization_consistency_loss(
            pred.offsets, pred.sizes, pred_f.offsets, pred_f.sizes,
            sample.flip.center_pairs,
        )
    con = con_c + con_l

    return {
        "pix": pix, "offset": off, "size": size, "center": center,
        "triplet": tri, "consistency_cls": con_c, "consistency_loc": con_l,
        "consistency": con, "total": total_loss(center, tri, con, w),
    }


def _warmup_scale(cfg: TrainConfig, iteration: int) -> float:
    horizon = int(cfg.consistency_warmup * cfg.iterations)
    if horizon <= 0:
        return 1.0
    return min(1.0, iteration / horizon)


def train_step(batch: Sequence[Sample], net: DetectorNet, w: LossWeights,
               cfg: TrainConfig, grid: GridConfig, optimizer: Adam, lr: float,
               iteration: int = 0) -> tuple[dict, dict]:
    """One optimization step over a batch; returns (params, loss breakdown).

    The breakdown holds batch-mean floats for every component, all finite and
    nonnegative.  "total" is always the full-weight combination, so logged
    histories satisfy total = center + lambda_tri*triplet + lambda_con*con
    regardless of where the warmup ramp stands; the ramp only discounts the
    consistency term inside the optimized scalar.
    """
    con_scale = _warmup_scale(cfg, iteration)
    sums = {k: 0.0 for k in LOSS_KEYS}
    with Tape() as tape:
        batch_total = None
        for slot, sample in enumerate(batch):
            parts = _image_losses(sample, net, w, cfg, grid,
                                  _mining_seed(cfg.seed, iteration, slot))
            for k in LOSS_KEYS:
                v = parts[k]
                sums[k] += v.item() if isinstance(v, Tensor) else float(v)
            t = total_loss(parts["center"], parts["triplet"],
                           parts["consistency"] * con_scale, w)
            batch_total = t if batch_total is None else batch_total + t
        loss = batch_total * (1.0 / len(batch))
        net.zero_grads()
        tape.backward(loss)

    breakdown = {k: sums[k] / len(batch) for k in LOSS_KEYS}
    for k, v in breakdown.items():
        if not math.isfinite(v):
            raise TrainingDivergedError(
                f"loss component {k!r} became non-finite ({v}) at iteration "
                f"{iteration}"
            )
    optimizer.step(net.params, lr)
    return net.params, breakdown


def _lr_at(cfg: TrainConfig, iteration: int) -> float:
    lr = cfg.learning_rate
    for frac in cfg.lr_drop_at:
        if iteration >= int(frac * cfg.iterations):
            lr *= 0.1
    return lr


def train(dataset: Sequence[tuple[np.ndarray, Sequence[BBox]]],
          grid: GridConfig, net_cfg: NetConfig, w: LossWeights,
          cfg: TrainConfig, net: Optional[DetectorNet] = None) -> TrainResult:
    """Full training run; returns the best-loss parameter snapshot.

    Sub-seeds: SeedSequence(seed, 0) initializes parameters, (seed, 1) drives
    batch sampling, and mining seeds derive from (seed, iteration, slot).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    seeds = np.random.SeedSequence(cfg.seed)
    init_seed, batch_seed = (int(s.generate_state(1)[0]) for s in seeds.spawn(2))
    if net is None:
        net = DetectorNet.create(net_cfg, init_seed)
    samples = prepare_samples(dataset, grid)
    optimizer = Adam(net.params)
    batch_rng = np.random.default_rng(batch_seed)

    log_file = None
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(cfg.log_path, "w")

    history: list[dict] = []
    best_loss = math.inf
    best_iteration = -1
    best_state = net.state_arrays()
    try:
        for it in range(cfg.iterations):
            lr = _lr_at(cfg, it)
            idxs = batch_rng.integers(0, len(samples), size=cfg.batch_size)
            batch = [samples[int(i)] for i in idxs]
            _, breakdown = train_step(batch, net, w, cfg, grid, optimizer, lr, it)
            entry = {"iteration": it, "lr": lr} | breakdown
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            if breakdown["total"] < best_loss:
                best_loss = breakdown["total"]
                best_iteration = it
                best_state = net.state_arrays()
    finally:
        if log_file:
            log_file.close()

    net.load_state_arrays(best_state)
    return TrainResult(
        net=net,
        history=history,
        best_iteration=best_iteration,
        best_loss=best_loss if history else math.nan,
        optimizer_state=optimizer.state_dict(),
    )
