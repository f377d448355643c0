"""Minimal dense tensors with reverse-mode automatic differentiation."""

from . import ops
from .ops import (
    add,
    add_channel_bias,
    concat,
    conv2d,
    dense,
    down2,
    elementwise,
    group_norm,
    mean,
    mse,
    mul,
    relu,
    resample2d,
    silu,
    square,
    sub,
    up2,
)
from .serialization import TensorFormatError, load_tensor, read_tensor, save_tensor, write_tensor
from .tensor import Tensor

__all__ = [
    "Tensor",
    "TensorFormatError",
    "add",
    "add_channel_bias",
    "concat",
    "conv2d",
    "dense",
    "down2",
    "elementwise",
    "group_norm",
    "load_tensor",
    "mean",
    "mse",
    "mul",
    "ops",
    "read_tensor",
    "relu",
    "resample2d",
    "save_tensor",
    "silu",
    "square",
    "sub",
    "up2",
    "write_tensor",
]
