"""Numeric substrate: autograd tensor, layers, optimizers, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    avg_pool3d,
    batch_norm,
    conv3d,
    elu,
    global_avg_pool3d,
    leaky_relu,
    sigmoid,
    softmax,
    softmax_rows,
    softplus,
)
from .gradcheck import grad_check
from .layers import BatchNorm, BatchNorm3d, Linear, Module
from .optim import Adam, AdamState, LrSchedule, adam_step, schedule_lr
from .tensor import Tensor, concat, matmul, no_grad, ones, stack, tensor, zeros

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "BatchNorm3d",
    "Linear",
    "LrSchedule",
    "Module",
    "Tensor",
    "adam_step",
    "avg_pool3d",
    "batch_norm",
    "concat",
    "conv3d",
    "elu",
    "global_avg_pool3d",
    "grad_check",
    "leaky_relu",
    "load_checkpoint",
    "matmul",
    "no_grad",
    "ones",
    "save_checkpoint",
    "schedule_lr",
    "sigmoid",
    "softmax",
    "softmax_rows",
    "softplus",
    "stack",
    "tensor",
    "zeros",
]
