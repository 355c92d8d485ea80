"""Minimal dense tensors with reverse-mode autodiff."""

from .engine import (
    ConfigError,
    Graph,
    ShapeError,
    Tensor,
    UsageError,
    backward,
    grad_enabled,
    no_grad,
    zero_grad,
)
from .ops import (
    abs_,
    add,
    add_const,
    avg_pool2d,
    clip,
    concat_channels,
    conv2d,
    elementwise,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    sqrt,
    square,
    sub,
    sum_,
    take_channels,
    upsample_nearest,
)

__all__ = [
    "ConfigError", "Graph", "ShapeError", "Tensor", "UsageError", "backward", "grad_enabled",
    "no_grad", "zero_grad", "abs_", "add", "add_const", "avg_pool2d", "clip", "concat_channels",
    "conv2d", "elementwise", "mean", "mul", "permute", "relu", "reshape", "scale", "sqrt",
    "square", "sub", "sum_", "take_channels", "upsample_nearest",
]
