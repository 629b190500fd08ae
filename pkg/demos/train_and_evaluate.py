"""Train a small detector on synthetic scenes and measure precision/recall.

This is a scaled-down run (800 iterations, narrow network, 60 scenes) that
finishes in a couple of minutes.  The defaults in TrainConfig and NetConfig
are what the full experiments use; with those the detector reaches
precision and recall above 0.95 on both classes.
"""

import time

from maskdet import (
    DecodeConfig,
    GridConfig,
    LossWeights,
    NetConfig,
    TrainConfig,
    decode,
    evaluate_frames,
    train,
)
from maskdet.synth import SceneSpec, generate_dataset

grid = GridConfig(height=64, width=64, stride=4, num_classes=2)

# disjoint seeds for train and test so nothing is memorized
train_set = generate_dataset(SceneSpec(seed=100, confuser_prob=0.3), 60)
test_set = generate_dataset(SceneSpec(seed=200, confuser_prob=0.3), 40)
print(f"{len(train_set)} training scenes, {len(test_set)} held-out scenes")

cfg = TrainConfig(iterations=800, batch_size=8, seed=0)
net_cfg = NetConfig(channels=(12, 24, 24))

t0 = time.time()
result = train(train_set, grid, net_cfg, LossWeights(), cfg)
print(f"trained {cfg.iterations} iterations in {time.time() - t0:.0f}s, "
      f"best loss {result.best_loss:.4f} at iteration {result.best_iteration}")

# loss trajectory, sampled every 100 iterations
print("\nloss curve:")
for h in result.history[::100]:
    print(f"  iter {h['iteration']:4d}  total {h['total']:8.4f}  "
          f"pix {h['pix']:7.4f}  triplet {h['triplet']:.4f}  "
          f"consistency {h['consistency']:.4f}")

# forward passes are the slow part, so run them once and decode the same
# predictions at two score thresholds
predictions = [(result.net.forward(image), boxes) for image, boxes in test_set]

for thr in (0.25, 0.40):
    frames = [(decode(pred, DecodeConfig(score_threshold=thr), grid), boxes)
              for pred, boxes in predictions]
    report = evaluate_frames(frames, iou_threshold=0.5)
    print(f"\nheld-out results at score threshold {thr}, IoU 0.5:")
    for c, label in ((0, "face"), (1, "mask")):
        print(f"  {label}: precision {report.precision[c]:.3f}  "
              f"recall {report.recall[c]:.3f}  f1 {report.f1(c):.3f}  "
              f"(tp={report.tp[c]} fp={report.fp[c]} fn={report.fn[c]})")

print("\na half-trained network trades precision for recall at the low "
      "threshold;\nthe full schedule separates the score distributions far "
      "enough that the\nchoice stops mattering")
