"""Neural-network primitives with hand-written backward rules."""
import numpy as np

from .. import kernels
from .tensor import Tensor, _make, _unbroadcast, as_tensor, matmul, add


def softmax(x, axis=-1):
    """Softmax with max-subtraction, so large logits never overflow."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return (gx,
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))

    return _make(out, (x, gamma, beta), bw)


def _bias_nchw(y, bias):
    if bias is None:
        return y
    bias = as_tensor(bias)
    return add(y, _make(bias.data.reshape(1, -1, 1, 1), (bias,), lambda g: (g.reshape(bias.shape),)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation; ``x`` is NCHW, ``weight`` is ``(out, in, kh, kw)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    H, W = xd.shape[2], xd.shape[3]
    kh, kw = wd.shape[2], wd.shape[3]
    out = kernels.conv2d_forward(xd, wd, stride, padding)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g, wd, stride, padding, H, W)
        if weight.requires_grad:
            gw = kernels.conv2d_backward_weight(xd, g, stride, padding, kh, kw)
        return gx, gw

    return _bias_nchw(_make(out, (x, weight), bw), bias)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution; ``weight`` is ``(in, out, kh, kw)``.

    Output size is ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    kh, kw = wd.shape[2], wd.shape[3]
    HO = (xd.shape[2] - 1) * stride - 2 * padding + kh + output_padding
    WO = (xd.shape[3] - 1) * stride - 2 * padding + kw + output_padding
    out = kernels.conv2d_backward_input(xd, wd, stride, padding, HO, WO)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv2d_forward(g, wd, stride, padding)
            gx = gx[:, :, :xd.shape[2], :xd.shape[3]]
        if weight.requires_grad:
            gw = kernels.conv2d_backward_weight(g, xd, stride, padding, kh, kw)
        return gx, gw

    return _bias_nchw(_make(out, (x, weight), bw), bias)


__all__ = [
    "Tensor",
    "softmax",
    "log_softmax",
    "linear",
    "layer_norm",
    "conv2d",
    "conv_transpose2d",
]
