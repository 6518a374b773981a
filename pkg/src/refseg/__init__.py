"""Text-guided referring segmentation with a cascaded prompt generator."""

from .core import (ModelConfig, TrainConfig, full_scale_config, synth_bench_config, toy_config,
                   toy_train_config)
from .model import RefSegModel, build_model, trainable_parameters
from .metrics import EvalReport, evaluate, iou

__all__ = [
    "ModelConfig", "TrainConfig", "full_scale_config", "synth_bench_config", "toy_config",
    "toy_train_config", "RefSegModel", "build_model", "trainable_parameters", "EvalReport",
    "evaluate", "iou",
]
__version__ = "0.1.0"
