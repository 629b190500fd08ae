"""Anchor-free face/mask detection core.

Objects are encoded as Gaussian peaks on a stride-4 class heatmap with
per-center offset and size regression, trained with a focal heatmap loss,
an online-mined triplet loss over box-pooled embeddings, and consistency
losses that tie predictions on an image to those on its horizontal flip.
Detection decodes heatmap peaks directly; no box NMS is involved.
"""

from .autodiff import Tape, Tensor
from .decode import DecodeConfig, Detection, PredictionPack, decode, peak_extract, targets_to_predictions
from .flips import FlipPair, flip_back_heatmap, flip_back_regression, flip_box, flip_sample
from .grid import BBox, GridConfig, GridIndex, Keypoint, center_of, clamp_box, grid_to_image, project_to_grid
from .losses import (
    LossWeights,
    TripletBatch,
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
from .metrics import EvalReport, evaluate_frames, iou, match_detections, precision_recall
from .network import DetectorNet, NetConfig, channel_attention, load_checkpoint, save_checkpoint, spatial_attention
from .synth import SceneSpec, generate_dataset, load_dataset, read_annotations, write_annotations, write_dataset
from .targets import TargetPack, encode_targets, gaussian_sigma, splat_gaussian
from .training import Adam, TrainConfig, TrainResult, TrainingDivergedError, prepare_samples, train, train_step

__version__ = "0.1.0"
