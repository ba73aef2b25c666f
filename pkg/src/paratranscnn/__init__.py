"""Parallel Transformer/CNN encoder with channel-attention fusion for medical image segmentation,
built on a small numpy autodiff engine."""
from .config import ConfigError, ModelConfig, TrainConfig, load_config, save_config
from .data import DatasetManifest, batch_iterator, load_manifest, synth_generate
from .losses import LossWeights, combined_loss, dice_loss
from .metrics import MetricReport, dsc, hd95, report
from .model import ParaTransCNN, build_model, count_flops, count_parameters
from .tensor import Parameter, Tensor, backward, no_grad
from .train import (Checkpoint, SGD, TrainingDiverged, TrainLog, evaluate, export_attention, poly_lr, predict,
                    sgd_step, train)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "DatasetManifest", "LossWeights", "MetricReport", "ModelConfig", "Parameter",
    "ParaTransCNN", "SGD", "Tensor", "TrainConfig", "TrainLog", "TrainingDiverged", "backward", "batch_iterator",
    "build_model", "combined_loss", "count_flops", "count_parameters", "dice_loss", "dsc", "evaluate",
    "export_attention", "hd95", "load_config", "load_manifest", "no_grad", "poly_lr", "predict", "report",
    "save_config", "sgd_step", "synth_generate", "train",
]
