"""Minimal numpy neural-network engine with reverse-mode gradients."""

from .checkpoint import load_model, model_from_bytes, model_to_bytes, save_model
from .layers import Conv2d, Dense, Flatten, Layer, ReLU, ScaleNorm
from .model import (
    EVAL,
    TRAIN,
    Model,
    backward,
    forward,
    grad_check,
    mse_loss,
    sgd_step,
    softmax_cross_entropy,
)

__all__ = [
    "Conv2d", "Dense", "Flatten", "Layer", "ReLU", "ScaleNorm", "Model",
    "TRAIN", "EVAL", "forward", "backward", "sgd_step", "grad_check",
    "softmax_cross_entropy", "mse_loss",
    "save_model", "load_model", "model_to_bytes", "model_from_bytes",
]
