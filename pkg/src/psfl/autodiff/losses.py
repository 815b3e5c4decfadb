"""Loss primitives: mean-square error, cross-entropy and KL divergence.

Probability inputs are clamped from below at ``LOG_FLOOR`` before taking
logs; clamped entries contribute no gradient.
"""
import logging

import numpy as np

from ..errors import ContractError
from .tensor import _make, as_tensor

LOG_FLOOR = 1e-12

log = logging.getLogger(__name__)


def mse(a, b):
    """Mean of squared differences over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def bw(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _make(out, (a, b), bw)


def cross_entropy(y, y_hat, eps=LOG_FLOOR):
    """``-sum(y * log(y_hat))`` averaged over leading (batch) axes.

    ``y`` is one-hot (or any target distribution) and ``y_hat`` a
    probability vector of the same length.
    """
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ContractError(f"cross_entropy length mismatch {y.shape} vs {y_hat.shape}")
    p = y_hat.data
    live = p >= eps
    if not live.all() and log.isEnabledFor(logging.DEBUG):
        log.debug("cross_entropy: %d probabilities clamped at %g", int((~live).sum()), eps)
    safe = np.maximum(p, eps)
    logp = np.log(safe)
    rows = y.data.size // y.data.shape[-1] if y.data.ndim else 1
    out = np.asarray(-(y.data * logp).sum() / rows)

    def bw(g):
        gy = -g * logp / rows
        gyh = np.where(live, -g * y.data / safe, 0.0) / rows
        return gy, gyh

    return _make(out, (y, y_hat), bw)


def kl_divergence(p, q, eps=LOG_FLOOR):
    """``KL(p || q) = sum(p * log(p / q))`` averaged over leading (batch) axes."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ContractError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    qlive = qd >= eps
    if log.isEnabledFor(logging.DEBUG):
        bad = (~qlive) & (pd > 0)
        if bad.any():
            log.debug("kl_divergence: %d q entries clamped at %g where p > 0", int(bad.sum()), eps)
    logq = np.log(np.maximum(qd, eps))
    logp = np.log(np.maximum(pd, eps))
    terms = np.where(pd > 0, pd * (logp - logq), 0.0)
    rows = pd.size // pd.shape[-1] if pd.ndim else 1
    out = np.asarray(terms.sum() / rows)

    def bw(g):
        gp = g * (logp - logq + 1.0) / rows
        gq = np.where(qlive, -g * pd / np.maximum(qd, eps), 0.0) / rows
        return gp, gq

    return _make(out, (p, q), bw)


def one_hot(labels, classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
