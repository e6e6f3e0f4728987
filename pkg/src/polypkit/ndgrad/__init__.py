"""Taped reverse-mode autodiff on dense float64 arrays, plus optimizers
and a binary parameter checkpoint format."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    exp,
    log,
    logmeanexp,
    matmul,
    relu,
    set_debug_checks,
    sigmoid,
    softmax,
    upsample2d,
)
from .optim import OptimizerState, adam, optimizer_step, sgd
from .checkpoint import CheckpointError, load_params, save_params
from . import gradcheck

__all__ = [
    "Tape", "Tensor", "ShapeError", "NonFiniteError", "set_debug_checks",
    "matmul", "conv2d", "upsample2d", "relu", "sigmoid", "softmax", "log",
    "exp", "concat", "broadcast_to", "logmeanexp",
    "OptimizerState", "sgd", "adam", "optimizer_step",
    "save_params", "load_params", "CheckpointError",
    "gradcheck",
]
