"""Command-line pipeline: scene synthesis, target encoding, gradient
verification, training, detection, evaluation, and loss ablations.

Every subcommand is deterministic given its flags: all randomness flows
from --seed through named substreams (data, init, mining), so changing one
stage's configuration never shifts another stage's draws.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .decode import DecodeConfig, Detection, decode
from .flips import flip_back_heatmap, flip_sample
from .grid import BBox, GridConfig
from .losses import (
    LossWeights,
    heatmap_consistency_loss,
    heatmap_focal_loss,
    localization_consistency_loss,
    mine_triplets,
    offset_loss,
    size_loss,
    total_loss,
    triplet_loss,
)
from .metrics import evaluate_frames
from .network import DetectorNet, NetConfig, load_checkpoint, save_checkpoint
from .synth import (
    SceneSpec,
    generate_dataset,
    load_image,
    read_annotations,
    write_dataset,
)
from .targets import encode_targets
from .training import TrainConfig, train

LOSS_TOL = 1e-5
END_TO_END_TOL = 1e-4


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------

def _add_grid_flags(p):
    p.add_argument("--stride", type=int, default=4,
                   help="prediction grid stride (default 4)")


def _add_loss_flags(p):
    p.add_argument("--alpha", type=float, default=2.0,
                   help="focal loss easy-example exponent (default 2)")
    p.add_argument("--beta", type=float, default=4.0,
                   help="focal loss Gaussian-shoulder exponent (default 4)")
    p.add_argument("--lambda-pix", type=float, default=1.0,
                   help="heatmap term weight (default 1)")
    p.add_argument("--lambda-off", type=float, default=1.0,
                   help="offset term weight (default 1)")
    p.add_argument("--lambda-s", type=float, default=0.01,
                   help="size term weight (default 0.01)")
    p.add_argument("--lambda-tri", type=float, default=1.0,
                   help="triplet term weight (default 1)")
    p.add_argument("--lambda-con", type=float, default=100.0,
                   help="consistency term weight (default 100)")
    p.add_argument("--margin", type=float, default=0.3,
                   help="triplet margin (default 0.3)")
    p.add_argument("--regression", choices=("l1", "smoothl1"), default="l1",
                   help="offset/size penalty shape (default l1)")


def _add_net_flags(p):
    p.add_argument("--cbam", choices=("cs", "sc", "off"), default="cs",
                   help="attention order: channel-spatial, reverse, or none")
    p.add_argument("--embed-dim", type=int, default=8,
                   help="embedding head width (default 8)")


def _add_decode_flags(p):
    p.add_argument("--score-threshold", type=float, default=0.3,
                   help="minimum peak score (default 0.3)")
    p.add_argument("--topk", type=int, default=100,
                   help="maximum detections per image (default 100)")


def _loss_weights(args) -> LossWeights:
    return LossWeights(
        lambda_pix=args.lambda_pix,
        lambda_off=args.lambda_off,
        lambda_size=args.lambda_s,
        lambda_triplet=args.lambda_tri,
        lambda_consistency=args.lambda_con,
        alpha=args.alpha,
        beta=args.beta,
        margin=args.margin,
        regression_mode=args.regression,
    )


def _grid_for(image, args) -> GridConfig:
    h, w = np.asarray(image).shape[:2]
    return GridConfig(height=h, width=w, stride=args.stride, num_classes=2)


def _named_dataset(ann_path):
    """[(name, image, boxes)] from an annotation file and sibling images."""
    ann = Path(ann_path)
    out = []
    for name, boxes in read_annotations(ann):
        out.append((name, load_image(ann.parent / name), boxes))
    return out


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------

def _fd_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        k = it.multi_index
        orig = x[k]
        x[k] = orig + eps
        hi = fn(x)
        x[k] = orig - eps
        lo = fn(x)
        x[k] = orig
        g[k] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def _rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _loss_cases(rng, w: LossWeights):
    """(name, build(tensor) -> scalar, input array) triples on random data."""
    grid = GridConfig(32, 32, 4, 2)
    boxes = [BBox(4.0, 5.0, 17.0, 18.0, 0), BBox(15.0, 14.0, 28.0, 27.0, 1)]
    pack = encode_targets(boxes, grid)
    y_hat = rng.uniform(0.05, 0.95, (8, 8, 2))
    field = rng.uniform(0.1, 0.9, (8, 8, 2))
    sizes = rng.uniform(4.0, 12.0, (8, 8, 2))
    emb = rng.normal(size=(8, 8, 4))
    emb /= np.linalg.norm(emb, axis=2, keepdims=True)
    flip = flip_sample(np.zeros((32, 32, 3)), boxes, grid)

    def focal(t):
        return heatmap_focal_loss(t, pack.heatmap, pack.n_objects, w.alpha, w.beta)

    def off(t):
        return offset_loss(t, pack.offsets, pack.n_objects,
                           w.regression_mode, w.smooth_l1_threshold)

    def size(t):
        return size_loss(t, pack.sizes, pack.n_objects,
                         w.regression_mode, w.smooth_l1_threshold)

    def tri(t):
        batch = mine_triplets(t, pack, grid.stride, rng_seed=17)
        return triplet_loss(batch, w.margin)

    def con_c(t):
        return heatmap_consistency_loss(t, y_hat[::-1].copy(), pack.mask)

    def con_c_jsd(t):
        return heatmap_consistency_loss(t, y_hat[::-1].copy(), pack.mask,
                                        mode="jsd")

    def con_l(t):
        return localization_consistency_loss(
            t, sizes, field * np.array([-1.0, 1.0]), sizes + 0.5,
            flip.center_pairs)

    return [
        ("focal", focal, y_hat.copy()),
        ("offset", off, field.copy()),
        ("size", size, sizes.copy()),
        ("triplet", tri, emb.copy()),
        ("consistency-cls", con_c, y_hat.copy()),
        ("consistency-cls-jsd", con_c_jsd, y_hat.copy()),
        ("consistency-loc", con_l, field.copy()),
    ]


def _end_to_end_case(seed: int, coords_per_tensor=2):
    """Total-objective gradient through a small network on one 16x16 scene,
    compared against finite differences on sampled parameter coordinates.
    """
    rng = np.random.default_rng(seed)
    grid = GridConfig(16, 16, 4, 2)
    w = LossWeights()
    boxes = [BBox(2.0, 2.0, 11.0, 11.0, int(rng.integers(0, 2)))]
    image = rng.uniform(0, 1, (16, 16, 3))
    pack = encode_targets(boxes, grid)
    flip = flip_sample(image, boxes, grid)
    fpack = encode_targets(flip.flipped_boxes, grid)
    net = DetectorNet.create(NetConfig(channels=(8, 8), embed_dim=4), seed)

    def objective() -> object:
        pred = net.forward(image)
        pred_f = net.forward(flip.flipped_image)
        pix = heatmap_focal_loss(pred.heatmap, pack.heatmap, pack.n_objects,
                                 w.alpha, w.beta)
        off = offset_loss(pred.offsets, pack.offsets, pack.n_objects,
                          w.regression_mode, w.smooth_l1_threshold)
        size = size_loss(pred.sizes, pack.sizes, pack.n_objects,
                         w.regression_mode, w.smooth_l1_threshold)
        center = (w.lambda_pix * pix + w.lambda_off * off
                  + w.lambda_size * size)
        batch = mine_triplets(pred.embeddings, pack, grid.stride, seed)
        tri = triplet_loss(batch, w.margin)
        con = heatmap_consistency_loss(
            pred.heatmap, flip_back_heatmap(pred_f.heatmap), pack.mask
        ) + localization_consistency_loss(
            pred.offsets, pred.sizes, pred_f.offsets, pred_f.sizes,
            flip.center_pairs)
        return total_loss(center, tri, con, w)

    with Tape() as tape:
        loss = objective()
        net.zero_grads()
        tape.backward(loss)
    analytic = {k: np.array(t.grad) for k, t in net.params.items()}

    errs = []
    eps = 1e-6
    for name, t in net.params.items():
        flat = t.data.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            with Tape():
                hi = float(ad.value(objective()))
            flat[j] = orig - eps
            with Tape():
                lo = float(ad.value(objective()))
            flat[j] = orig
            num = (hi - lo) / (2 * eps)
            ana = analytic[name].reshape(-1)[j]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1.0))
    return float(np.max(errs))


def gradient_report(seed: int, instances: int = 10) -> dict[str, tuple[float, float]]:
    """Max relative FD error per loss term plus the end-to-end objective.

    Returns {name: (max_rel_err, tolerance)}; a term passes when
    max_rel_err <= tolerance.
    """
    w = LossWeights()
    worst: dict[str, float] = {}
    for k in range(instances):
        rng = np.random.default_rng(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        for name, build, x in _loss_cases(rng, w):
            with Tape() as tape:
                t = Tensor(x.copy())
                out = build(t)
                if isinstance(out, Tensor):
                    tape.backward(out)
                # grad is None when the term is inactive on this draw
                # (empty triplet batch, hinge everywhere satisfied)
                analytic = (np.zeros_like(x) if not isinstance(out, Tensor)
                            or t.grad is None else np.array(t.grad))

            def scalar(v, build=build):
                with Tape():
                    r = build(Tensor(v))
                    return float(ad.value(r)) if isinstance(r, Tensor) else float(r)

            err = _rel_err(analytic, _fd_grad(scalar, x.copy()))
            worst[name] = max(worst.get(name, 0.0), err)
    for k in range(instances):
        err = _end_to_end_case(seed + 1000 + k)
        worst["end-to-end"] = max(worst.get("end-to-end", 0.0), err)

    return {
        name: (err, END_TO_END_TOL if name == "end-to-end" else LOSS_TOL)
        for name, err in worst.items()
    }


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = SceneSpec(
        height=args.height, width=args.width,
        min_objects=args.min_objects, max_objects=args.max_objects,
        min_size=args.min_size, max_size=args.max_size,
        min_separation=args.min_separation,
        confuser_prob=args.confuser_prob, noise=args.noise, seed=args.seed,
    )
    data = generate_dataset(spec, args.count)
    ann = write_dataset(data, args.out)
    n_boxes = sum(len(b) for _, b in data)
    print(f"wrote {args.count} scenes ({n_boxes} boxes) -> {ann}")
    return 0


def _cmd_encode(args) -> int:
    named = _named_dataset(args.data)
    with open(args.out, "w") as f:
        for name, image, boxes in named:
            grid = _grid_for(image, args)
            pack = encode_targets(boxes, grid)
            rec = {
                "image": name,
                "heatmap": pack.heatmap.round(12).tolist(),
                "mask": pack.mask.astype(int).tolist(),
                "centers": [
                    {
                        "i": idx.i, "j": idx.j,
                        "offset": [float(v) for v in off],
                        "size": [float(v) for v in size],
                        "class": cls,
                    }
                    for (idx, off), (_, size), cls in zip(
                        pack.offsets, pack.sizes, pack.classes)
                ],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"encoded {len(named)} scenes -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradient_report(args.seed, args.instances)
    failed = False
    for name, (err, tol) in report.items():
        ok = err <= tol
        failed |= not ok
        print(f"{name:<22s} max_rel_err={err:.3e}  tol={tol:.0e}  "
              f"{'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def _cmd_train(args) -> int:
    named = _named_dataset(args.data)
    if not named:
        print("error: dataset is empty", file=sys.stderr)
        return 1
    dataset = [(img, boxes) for _, img, boxes in named]
    grid = _grid_for(dataset[0][0], args)
    net_cfg = NetConfig(cbam_order=args.cbam, embed_dim=args.embed_dim)
    cfg = TrainConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        learning_rate=args.lr, seed=args.seed,
        enable_triplet=not args.no_triplet,
        enable_consistency=not args.no_consistency,
        consistency_mode=args.consistency_mode,
        consistency_warmup=args.warmup,
        log_path=args.log,
    )
    result = train(dataset, grid, net_cfg, _loss_weights(args), cfg)
    save_checkpoint(result.net, args.out, optimizer_state=result.optimizer_state)
    if result.history:
        print(f"trained {cfg.iterations} iterations; best total "
              f"{result.best_loss:.4f} at iteration {result.best_iteration}")
    else:
        print("wrote untrained checkpoint (0 iterations)")
    print(f"checkpoint -> {args.out}")
    return 0


def _cmd_detect(args) -> int:
    net, _ = load_checkpoint(args.checkpoint, expect_num_classes=2)
    dcfg = DecodeConfig(score_threshold=args.score_threshold, top_k=args.topk)
    named = _named_dataset(args.data)
    count = 0
    with open(args.out, "w") as f:
        for name, image, _ in named:
            grid = _grid_for(image, args)
            dets = decode(net.forward(image).detached(), dcfg, grid)
            for d in dets:
                f.write(json.dumps({
                    "image": name,
                    "x1": d.box.x1, "y1": d.box.y1,
                    "x2": d.box.x2, "y2": d.box.y2,
                    "class": d.box.class_id, "score": d.score,
                }, sort_keys=True) + "\n")
            count += len(dets)
    print(f"{count} detections over {len(named)} images -> {args.out}")
    return 0


def _read_detections(path) -> dict[str, list[Detection]]:
    grouped: dict[str, list[Detection]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                det = Detection(
                    BBox(float(obj["x1"]), float(obj["y1"]),
                         float(obj["x2"]), float(obj["y2"]),
                         int(obj["class"])),
                    float(obj["score"]),
                )
                name = str(obj["image"])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: bad detection record: {e}")
            grouped.setdefault(name, []).append(det)
    return grouped


def _cmd_eval(args) -> int:
    grouped = _read_detections(args.detections)
    records = read_annotations(args.data)
    known = {name for name, _ in records}
    stray = sorted(set(grouped) - known)
    if stray:
        print(f"error: detections reference unknown images: {stray[:5]}",
              file=sys.stderr)
        return 1
    frames = [(grouped.get(name, []), boxes) for name, boxes in records]
    report = evaluate_frames(frames, iou_threshold=args.iou_threshold)
    print(f"{'class':<6s} {'prec':>7s} {'recall':>7s} {'f1':>7s} "
          f"{'tp':>5s} {'fp':>5s} {'fn':>5s}")
    for c in sorted(report.precision):
        print(f"{c:<6d} {report.precision[c]:7.4f} {report.recall[c]:7.4f} "
              f"{report.f1(c):7.4f} {report.tp[c]:5d} {report.fp[c]:5d} "
              f"{report.fn[c]:5d}")
    macro = float(np.mean([report.f1(c) for c in report.precision]))
    print(f"macro-F1 {macro:.4f} at IoU {args.iou_threshold}")
    return 0


ABLATION_ROWS = (
    ("center-only", False, False),
    ("center+triplet", True, False),
    ("center+consistency", False, True),
    ("center+triplet+consistency", True, True),
)


def _macro_f1(net, test_named, args) -> float:
    dcfg = DecodeConfig(score_threshold=args.score_threshold, top_k=args.topk)
    frames = []
    for _, image, boxes in test_named:
        grid = _grid_for(image, args)
        frames.append((decode(net.forward(image).detached(), dcfg, grid), boxes))
    report = evaluate_frames(frames, iou_threshold=args.iou_threshold)
    return float(np.mean([report.f1(c) for c in report.precision]))


def _train_once(dataset, grid, w, args, seed, enable_tri, enable_con,
                regression=None) -> DetectorNet:
    if regression is not None:
        w = dataclasses.replace(w, regression_mode=regression)
    cfg = TrainConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        learning_rate=args.lr, seed=seed,
        enable_triplet=enable_tri, enable_consistency=enable_con,
        consistency_warmup=args.warmup,
    )
    net_cfg = NetConfig(cbam_order=args.cbam, embed_dim=args.embed_dim)
    return train(dataset, grid, net_cfg, w, cfg).net


def _cmd_ablate(args) -> int:
    train_named = _named_dataset(args.data)
    test_named = _named_dataset(args.test_data)
    if not train_named or not test_named:
        print("error: ablation needs nonempty train and test sets",
              file=sys.stderr)
        return 1
    dataset = [(img, boxes) for _, img, boxes in train_named]
    grid = _grid_for(dataset[0][0], args)
    w = _loss_weights(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    print(f"{'configuration':<28s} {'macro-F1':>9s}  per-seed")
    rows = []
    for label, tri, con in ABLATION_ROWS:
        scores = [
            _macro_f1(_train_once(dataset, grid, w, args, s, tri, con),
                      test_named, args)
            for s in seeds
        ]
        mean = float(np.mean(scores))
        rows.append((label, mean, scores))
        per_seed = " ".join(f"{v:.4f}" for v in scores)
        print(f"{label:<28s} {mean:9.4f}  [{per_seed}]")

    print(f"{'regression mode':<28s} {'macro-F1':>9s}")
    for mode in ("l1", "smoothl1"):
        net = _train_once(dataset, grid, w, args, seeds[0], True, True,
                          regression=mode)
        score = _macro_f1(net, test_named, args)
        rows.append((f"regression={mode}", score, [score]))
        print(f"{'regression=' + mode:<28s} {score:9.4f}")

    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"config": r[0], "macro_f1": r[1], "per_seed": r[2]} for r in rows],
            indent=2) + "\n")
        print(f"table -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdet",
        description="Anchor-free face/mask detector: synthesis, training, "
                    "detection, and evaluation on a handwritten autodiff core.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--min-size", type=float, default=12.0)
    p.add_argument("--max-size", type=float, default=18.0)
    p.add_argument("--min-separation", type=float, default=12.0)
    p.add_argument("--confuser-prob", type=float, default=0.3,
                   help="chance a bare face gets a mask-shaped occluder")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("encode", help="dump encoded training targets as JSONL")
    p.add_argument("--data", required=True, help="annotations.jsonl path")
    p.add_argument("--out", required=True, help="output JSONL path")
    _add_grid_flags(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("gradcheck",
                       help="verify every loss gradient against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10,
                   help="random instances per term (default 10)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train", help="train a detector and write a checkpoint")
    p.add_argument("--data", required=True, help="annotations.jsonl path")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="JSONL loss log path")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=float, default=0.3,
                   help="consistency ramp fraction (default 0.3)")
    p.add_argument("--consistency-mode", choices=("l2", "jsd"), default="l2")
    p.add_argument("--no-triplet", action="store_true",
                   help="drop the triplet term")
    p.add_argument("--no-consistency", action="store_true",
                   help="drop both consistency terms")
    _add_grid_flags(p)
    _add_loss_flags(p)
    _add_net_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over images, write JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="annotations.jsonl path")
    p.add_argument("--out", required=True, help="detections JSONL path")
    _add_grid_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="score detections against groundtruth")
    p.add_argument("--detections", required=True, help="detections JSONL path")
    p.add_argument("--data", required=True, help="annotations.jsonl path")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate",
                       help="loss-toggle grid plus L1/SmoothL1 comparison")
    p.add_argument("--data", required=True, help="train annotations.jsonl")
    p.add_argument("--test-data", required=True, help="test annotations.jsonl")
    p.add_argument("--out", default=None, help="optional JSON table path")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    p.add_argument("--warmup", type=float, default=0.3)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    _add_grid_flags(p)
    _add_loss_flags(p)
    _add_net_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def run(argv=None) -> int:
    """Parse argv and dispatch; returns the process exit status."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
