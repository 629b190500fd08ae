"""A small stride-4 convolutional detector with channel/spatial attention.

Backbone: 3x3 conv blocks (the first two at stride 2, the rest at stride 1)
each followed by an attention pair whose order is configurable.  Four 1x1
heads produce per-cell class scores (sigmoid), sub-cell center offsets,
pixel sizes (softplus, always positive), and a unit-normalized embedding.

The forward pass runs on autodiff Tensors when a Tape is active and on raw
numpy arrays otherwise, through the same code path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decode import PredictionPack

CHECKPOINT_VERSION = 1
CBAM_ORDERS = ("cs", "sc", "off")  # channel-then-spatial, reverse, disabled


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, ...] = (16, 32, 32)
    num_classes: int = 2
    embed_dim: int = 8
    cbam_reduction: int = 4
    cbam_order: str = "cs"
    spatial_kernel: int = 7
    heat_bias: float = -math.log(9.0)  # start class probabilities near 0.1
    size_scale: float = 8.0    # size head output unit in pixels
    size_prior: float = 16.0   # pixels; size head bias starts at this output

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("need at least two blocks (two stride-2 convs)")
        for c in self.channels:
            if c % self.cbam_reduction:
                raise ValueError(
                    f"channel count {c} not divisible by reduction "
                    f"{self.cbam_reduction}"
                )
        if self.cbam_order not in CBAM_ORDERS:
            raise ValueError(f"cbam_order must be one of {CBAM_ORDERS}")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")
        if self.embed_dim < 1 or self.num_classes < 1:
            raise ValueError("embed_dim and num_classes must be >= 1")

    @property
    def stride(self) -> int:
        return 4


def channel_attention(x, w1, b1, w2, b2):
    """Scale channels by sigmoid(MLP(avgpool) + MLP(maxpool)).

    The two global poolings share the MLP.  With all-zero weights the gate
    is sigmoid(0) = 0.5 everywhere, halving the input.
    """
    def mlp(v):
        return ad.dense(ad.relu(ad.dense(v, w1, b1)), w2, b2)

    gate = ad.sigmoid(mlp(ad.global_avg_pool(x)) + mlp(ad.global_max_pool(x)))
    return x * gate


def spatial_attention(x, w, b):
    """Scale cells by a sigmoid conv over [channel-mean, channel-max] maps."""
    stacked = ad.concat([ad.channel_mean(x), ad.channel_max(x)], axis=2)
    gate = ad.sigmoid(ad.conv2d(stacked, w, b, stride=1))
    return x * gate


class DetectorNet:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: NetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: NetConfig, seed: int) -> "DetectorNet":
        """He-style normal init, deterministic in the seed."""
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def conv(name, k, cin, cout, bias=0.0):
            std = math.sqrt(2.0 / (k * k * cin))
            p[f"{name}.w"] = Tensor(rng.normal(0.0, std, (k, k, cin, cout)))
            p[f"{name}.b"] = Tensor(np.full(cout, bias, dtype=np.float64))

        def dense_pair(name, cin, cout):
            std = math.sqrt(2.0 / cin)
            p[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cin, cout)))
            p[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float64))

        cin = 3
        for bi, cout in enumerate(cfg.channels):
            conv(f"block{bi}", 3, cin, cout)
            hidden = cout // cfg.cbam_reduction
            dense_pair(f"block{bi}.ca1", cout, hidden)
            dense_pair(f"block{bi}.ca2", hidden, cout)
            conv(f"block{bi}.sa", cfg.spatial_kernel, 2, 1)
            cin = cout

        conv("head_heat", 1, cin, cfg.num_classes, bias=cfg.heat_bias)
        conv("head_offset", 1, cin, 2)
        # inverse softplus of the prior, so sizes start near the typical object
        size_bias = math.log(math.expm1(cfg.size_prior / cfg.size_scale))
        conv("head_size", 1, cin, 2, bias=size_bias)
        conv("head_embed", 1, cin, cfg.embed_dim)
        return cls(cfg, p)

    def _live_params(self):
        if ad.tape_active():
            return self.params
        return {k: v.data for k, v in self.params.items()}

    def forward(self, image: np.ndarray) -> PredictionPack:
        """image: (H, W, 3) float array with H and W divisible by 4."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if image.shape[0] % 4 or image.shape[1] % 4:
            raise ValueError(
                f"image dims {image.shape[:2]} must be divisible by 4"
            )
        p = self._live_params()
        cfg = self.cfg
        x = np.asarray(image, dtype=np.float64)
        for bi in range(len(cfg.channels)):
            stride = 2 if bi < 2 else 1
            x = ad.relu(ad.conv2d(x, p[f"block{bi}.w"], p[f"block{bi}.b"], stride))
            if cfg.cbam_order == "cs":
                x = channel_attention(x, p[f"block{bi}.ca1.w"], p[f"block{bi}.ca1.b"],
                                      p[f"block{bi}.ca2.w"], p[f"block{bi}.ca2.b"])
                x = spatial_attention(x, p[f"block{bi}.sa.w"], p[f"block{bi}.sa.b"])
            elif cfg.cbam_order == "sc":
                x = spatial_attention(x, p[f"block{bi}.sa.w"], p[f"block{bi}.sa.b"])
                x = channel_attention(x, p[f"block{bi}.ca1.w"], p[f"block{bi}.ca1.b"],
                                      p[f"block{bi}.ca2.w"], p[f"block{bi}.ca2.b"])

        heat = ad.sigmoid(ad.conv2d(x, p["head_heat.w"], p["head_heat.b"]))
        offsets = ad.conv2d(x, p["head_offset.w"], p["head_offset.b"])
        sizes = cfg.size_scale * ad.softplus(
            ad.conv2d(x, p["head_size.w"], p["head_size.b"]))
        embed = ad.conv2d(x, p["head_embed.w"], p["head_embed.b"])
        # cells whose features died under relu would divide by ~0 here; the
        # floor turns them into a gentle linear branch (slope 1e3, matching
        # the normalized branch at the boundary) without touching healthy
        # cells, whose norms sit orders of magnitude above 1e-3
        norms = ad.sqrt(ad.clip(ad.sum(embed * embed, axis=2, keepdims=True),
                                1e-6, np.inf))
        embed = embed / norms
        return PredictionPack(heat, offsets, sizes, embed)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].data.shape:
                raise ValueError(
                    f"shape mismatch for {k}: {v.shape} vs "
                    f"{self.params[k].data.shape}"
                )
            self.params[k].data = np.asarray(v, dtype=np.float64).copy()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(net: DetectorNet, path, optimizer_state: dict | None = None) -> None:
    """Canonical JSON dump: save -> load -> save is byte-identical."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.cfg) | {"channels": list(net.cfg.channels)},
        "params": {
            k: {"shape": list(v.data.shape), "data": v.data.ravel().tolist()}
            for k, v in net.params.items()
        },
    }
    if optimizer_state is not None:
        blob["optimizer"] = optimizer_state
    Path(path).write_text(_canonical_json(blob))


def load_checkpoint(path, expect_num_classes: int | None = None):
    """Rebuild (net, optimizer_state_or_None) from a checkpoint file."""
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"checkpoint {path} is not valid JSON: {e}") from e
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint format_version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    raw_cfg = dict(blob["config"])
    raw_cfg["channels"] = tuple(raw_cfg["channels"])
    cfg = NetConfig(**raw_cfg)
    if expect_num_classes is not None and cfg.num_classes != expect_num_classes:
        raise ValueError(
            f"checkpoint num_classes {cfg.num_classes} != expected "
            f"{expect_num_classes}"
        )
    params = {}
    for k, spec in blob["params"].items():
        arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        params[k] = Tensor(arr)
    net = DetectorNet(cfg, params)
    return net, blob.get("optimizer")
