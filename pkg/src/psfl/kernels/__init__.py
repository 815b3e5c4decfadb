"""Convolution kernels with a compiled backend and a numpy fallback.

The compiled extension ``psfl.kernels._conv`` is used when it was built;
otherwise the numpy implementations in :mod:`psfl.kernels.fallback` are
selected. Setting ``PSFL_KERNELS=numpy`` forces the fallback.

Shapes follow NCHW: ``x`` is ``(B, C, H, W)`` and ``w`` is ``(O, C, KH, KW)``.
"""
import os
from contextlib import contextmanager

import numpy as np

from . import fallback

_compiled = None
if os.environ.get("PSFL_KERNELS", "").lower() != "numpy":
    try:
        from . import _conv as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else fallback


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, stride=1, padding=0):
    return _impl.conv2d_forward(_c(x), _c(w), int(stride), int(padding))


def conv2d_backward_input(gy, w, stride, padding, H, W):
    return _impl.conv2d_backward_input(_c(gy), _c(w), int(stride), int(padding), int(H), int(W))


def conv2d_backward_weight(x, gy, stride, padding, KH, KW):
    return _impl.conv2d_backward_weight(_c(x), _c(gy), int(stride), int(padding), int(KH), int(KW))


def backends():
    """Return ``{name: module}`` for every backend available in this process."""
    out = {"numpy": fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


@contextmanager
def use_backend(name):
    """Temporarily route every kernel call through backend ``name``."""
    global _impl, BACKEND
    mods = backends()
    if name not in mods:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(mods)}")
    saved = _impl, BACKEND
    _impl, BACKEND = mods[name], name
    try:
        yield mods[name]
    finally:
        _impl, BACKEND = saved
