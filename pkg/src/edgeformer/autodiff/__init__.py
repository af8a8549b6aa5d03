"""Minimal reverse-mode differentiation for the EdgeFormer network."""

from .gradcheck import grad_check
from .ops import (
    BatchNormState,
    DegenerateBatchError,
    ShapeError,
    add,
    batch_norm,
    concat,
    dropout,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    softmax_cross_entropy,
    sub,
    swapaxes,
    transpose,
)
from .nn import encoder_layer, feed_forward, multi_head_attention
from .optim import AdamState, LrSchedule, adam_step, lr_at_epoch
from .tensor import Tape, Tensor, current_tape, no_tape

__all__ = [
    "AdamState", "BatchNormState", "DegenerateBatchError", "LrSchedule", "ShapeError", "Tape",
    "Tensor", "adam_step", "add", "batch_norm", "concat", "current_tape", "dropout",
    "encoder_layer", "feed_forward", "grad_check", "layer_norm", "linear", "lr_at_epoch",
    "matmul", "mean", "mul", "multi_head_attention", "no_tape", "relu", "reshape", "scale",
    "softmax", "softmax_cross_entropy", "sub", "swapaxes", "transpose",
]
