"""AWGN physical channel and per-round SNR schedules.

The channel adds Gaussian noise whose variance is referenced to the
empirical power of each transmitted row. The noise is a constant in the
graph, so gradients pass straight through to the transmitter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, scale
from .errors import ContractError

# Noise reference for an all-zero signal; keeps the noise variance defined.
POWER_FLOOR = 1e-12


def snr_db_to_linear(snr_db):
    if np.ndim(snr_db):
        return 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)
    return 10.0 ** (float(snr_db) / 10.0)


def snr_linear_to_db(ratio):
    return 10.0 * np.log10(ratio)


@dataclass
class ChannelRealization:
    """One draw of the channel: SNR, standard-normal noise and gain.

    ``unit_noise`` is scaled at transmit time so that it can be fixed for a
    forward/backward pair. ``math.inf`` as ``snr_db`` means a noiseless link.
    """

    snr_db: float
    unit_noise: np.ndarray | None = None
    gain: float = 1.0
    reference_power: float | None = None

    @classmethod
    def sample(cls, shape, snr_db, rng, reference_power=None):
        noise = None if math.isinf(snr_db) and snr_db > 0 else rng.standard_normal(shape)
        return cls(float(snr_db), noise, 1.0, reference_power)

    @classmethod
    def noiseless(cls):
        return cls(math.inf)

    def noise_for(self, x):
        """Noise array that :meth:`apply` would add to ``x`` (zeros if noiseless)."""
        if self.unit_noise is None:
            return np.zeros_like(x)
        if self.unit_noise.shape != x.shape:
            raise ContractError(f"noise shape {self.unit_noise.shape} does not match signal {x.shape}")
        if self.reference_power is not None:
            power = np.asarray(self.reference_power)
        elif x.ndim >= 2:
            power = (x * x).mean(axis=-1, keepdims=True)
        else:
            power = np.asarray((x * x).mean())
        power = np.maximum(power, POWER_FLOOR)
        sigma = np.sqrt(power / snr_db_to_linear(self.snr_db))
        return sigma * self.unit_noise

    def apply(self, X):
        X = as_tensor(X)
        gx = X if self.gain == 1.0 else scale(X, self.gain)
        if self.unit_noise is None:
            return gx
        return add(gx, Tensor(self.noise_for(gx.data)))


def awgn_transmit(X, snr_db, rng, reference_power=None):
    """``Y = X + N`` with ``var(N) = power(X) / 10**(snr_db/10)`` per row."""
    X = as_tensor(X)
    if not np.all(np.isfinite(X.data)):
        raise ContractError("awgn_transmit needs a finite signal")
    return ChannelRealization.sample(X.shape, snr_db, rng, reference_power).apply(X)


@dataclass
class SNRSchedule:
    """``draws[t, k]`` is client ``k``'s SNR in dB during round ``t``."""

    draws: np.ndarray
    seed: int
    snr_min_db: float
    snr_max_db: float

    @property
    def rounds(self):
        return self.draws.shape[0]

    @property
    def clients(self):
        return self.draws.shape[1]

    def round_mean(self, t):
        return float(self.draws[t].mean())


def sample_schedule(rounds, clients, snr_min_db, snr_max_db, seed):
    """i.i.d. uniform SNR draws on ``[snr_min_db, snr_max_db]``."""
    if snr_min_db > snr_max_db:
        raise ContractError("snr_min_db must not exceed snr_max_db")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C4ED]))
    draws = rng.uniform(snr_min_db, snr_max_db, size=(int(rounds), int(clients)))
    if snr_min_db == snr_max_db:
        draws[:] = snr_min_db
    return SNRSchedule(draws, int(seed), float(snr_min_db), float(snr_max_db))


def empirical_snr_db(x, y):
    """SNR of ``y`` treating ``y - x`` as noise."""
    x = np.asarray(x)
    noise = np.asarray(y) - x
    return float(snr_linear_to_db((x * x).mean() / (noise * noise).mean()))
