"""Spatial-temporal transformer for frame-level affect analysis on
pre-extracted visual features (valence-arousal, expression, action units)."""

from .autograd import Tape, Tensor, backward, tensor
from .config import RunConfig, TrainConfig, build_config
from .model import ModelConfig, TaskOutputs, init_params, model_forward
from .objectives import MetricReport, au_f1, ccc, macro_f1

__version__ = "0.1.0"

__all__ = [
    "au_f1",
    "backward",
    "build_config",
    "ccc",
    "init_params",
    "macro_f1",
    "MetricReport",
    "model_forward",
    "ModelConfig",
    "RunConfig",
    "Tape",
    "TaskOutputs",
    "Tensor",
    "tensor",
    "TrainConfig",
]
