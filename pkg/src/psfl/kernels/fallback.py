"""Pure-numpy convolution kernels with the same signatures as the Cython ones."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, C, HO, WO, KH, KW)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, padding):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, padding)
    return np.ascontiguousarray(np.einsum("bchwij,ocij->bohw", win, w, optimize=True))


def conv2d_backward_input(gy, w, stride, padding, H, W):
    B, _, HO, WO = gy.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    Hp, Wp = H + 2 * padding, W + 2 * padding
    # room for windows that hang past the padded edge (skipped by the kernel loops)
    gx = np.zeros((B, C, max(Hp, (HO - 1) * stride + kh), max(Wp, (WO - 1) * stride + kw)))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bohw,oc->bchw", gy, w[:, :, i, j], optimize=True)
            gx[:, :, i:i + stride * (HO - 1) + 1:stride, j:j + stride * (WO - 1) + 1:stride] += contrib
    return np.ascontiguousarray(gx[:, :, padding:padding + H, padding:padding + W])


def conv2d_backward_weight(x, gy, stride, padding, KH, KW):
    win = _windows(x, KH, KW, stride, padding)
    HO, WO = gy.shape[2], gy.shape[3]
    win = win[:, :, :HO, :WO]
    return np.ascontiguousarray(np.einsum("bchwij,bohw->ocij", win, gy, optimize=True))
