"""Minimal reverse-mode differentiation engine (float64, numpy-backed)."""
from .gradcheck import finite_difference_check
from .losses import LOG_FLOOR, cross_entropy, kl_divergence, mse, one_hot
from .nn import conv2d, conv_transpose2d, layer_norm, linear, log_softmax, softmax
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    getitem,
    gradients,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sqrt,
    square,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "LOG_FLOOR",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "cross_entropy",
    "div",
    "exp",
    "finite_difference_check",
    "getitem",
    "gradients",
    "kl_divergence",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mse",
    "mul",
    "one_hot",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "tanh",
    "transpose",
    "tsum",
]
