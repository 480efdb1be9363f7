"""Attention-guided encoder/attention/decoder LSTM for compositional sequence
classification, with its own reverse-mode tape, synthetic dataset, two-phase
trainer, and attention-map visualization."""

from .autodiff import Parameter, Tape, Tensor, backward
from .model import Model, ModelConfig
from .training import TrainConfig, evaluate, load_checkpoint, run_training, save_checkpoint

__all__ = [
    "Parameter", "Tape", "Tensor", "backward",
    "Model", "ModelConfig",
    "TrainConfig", "evaluate", "load_checkpoint", "run_training", "save_checkpoint",
]

__version__ = "0.1.0"
