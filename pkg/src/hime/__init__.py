"""Differentiable numpy operators and a desk-scale trainer for multi-exemplar headshot super-resolution."""

from .model import HimeConfig, HimeModel, hime_forward, load_checkpoint, model_init, save_checkpoint
from .tensor import DIFFERENTIABLE_OPS, ConfigurationError, FormatError, ParameterError, ShapeError

__all__ = [
    "DIFFERENTIABLE_OPS", "ConfigurationError", "FormatError", "HimeConfig", "HimeModel",
    "ParameterError", "ShapeError", "hime_forward", "load_checkpoint", "model_init", "save_checkpoint",
]
