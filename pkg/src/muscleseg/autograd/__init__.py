"""Minimal reverse-mode autodiff: exactly the operators the segmentation network needs."""
from .ops import (
    DICE_EPS,
    SELU_ALPHA,
    SELU_LAMBDA,
    add,
    concat,
    conv3d,
    conv3d_transpose,
    residual_combine,
    selu,
    sigmoid,
    soft_dice_loss,
)
from .optim import AdamState, NonFiniteGradientError, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "DICE_EPS", "SELU_ALPHA", "SELU_LAMBDA", "AdamState", "NonFiniteGradientError", "Tensor",
    "adam_step", "add", "concat", "conv3d", "conv3d_transpose", "no_grad", "residual_combine",
    "selu", "sigmoid", "soft_dice_loss",
]
