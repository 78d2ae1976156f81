"""HSANet bitemporal change detection on a small numpy autodiff engine."""

from .data import BitemporalSample, Manifest, SynthSpec, load_manifest, render_error_map, synth_generate, tile_scene
from .estimator import HSANetChangeDetector
from .metrics import ConfusionMatrix, MetricReport, accumulate_cm, binarize, dice_loss, metrics_from_cm
from .model import ModelConfig, ParamStore, forward, init_params
from .tensor import Tensor, backward
from .training import TrainConfig, evaluate, predict, train

__all__ = [
    "BitemporalSample",
    "ConfusionMatrix",
    "HSANetChangeDetector",
    "Manifest",
    "MetricReport",
    "ModelConfig",
    "ParamStore",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "accumulate_cm",
    "backward",
    "binarize",
    "dice_loss",
    "evaluate",
    "forward",
    "init_params",
    "load_manifest",
    "metrics_from_cm",
    "predict",
    "render_error_map",
    "synth_generate",
    "tile_scene",
    "train",
]

__version__ = "0.1.0"
