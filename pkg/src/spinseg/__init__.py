"""SPiN: lesion segmentation with a subpixel embedding and a learnable downsampler.

Pure numpy/scipy implementation: a small reverse-mode autodiff core, the
network and its ablation variants, losses and metrics, a slice-window data
pipeline with a synthetic lesion generator, training, evaluation and a CLI
(``python -m spinseg``).
"""

from .config import TrainConfig, lr_at, scaled_schedules
from .evaluate import MetricsReport, evaluate, predict_volume, run_ablation
from .losses import bce_loss, soft_dice_loss
from .metrics import ConfusionCounts, MetricValues, confusion, metrics, threshold
from .model import ModelConfig, SpinModel, count_parameters, forward_full
from .subpixel import depth_to_space, space_to_depth
from .tensor import Tensor, backward, no_grad
from .train import train

__all__ = [
    "ConfusionCounts",
    "MetricValues",
    "MetricsReport",
    "ModelConfig",
    "SpinModel",
    "Tensor",
    "TrainConfig",
    "backward",
    "bce_loss",
    "confusion",
    "count_parameters",
    "depth_to_space",
    "evaluate",
    "forward_full",
    "lr_at",
    "metrics",
    "no_grad",
    "predict_volume",
    "run_ablation",
    "scaled_schedules",
    "soft_dice_loss",
    "space_to_depth",
    "threshold",
    "train",
]
