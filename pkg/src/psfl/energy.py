"""Uplink rate, delay and energy for one client upload."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .channel import snr_db_to_linear
from .errors import ContractError, UndefinedLinkError

P_MAX_W = 0.1
DEFAULT_BANDWIDTH_HZ = 1e6
BITS_PER_WEIGHT = (16, 32, 64)


@dataclass(frozen=True)
class LinkBudget:
    bandwidth_hz: float
    power_w: float
    snr_db: float
    p_max_w: float = P_MAX_W

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ContractError("bandwidth must be positive")
        if not 0 < self.power_w <= self.p_max_w:
            raise ContractError(f"transmit power must lie in (0, {self.p_max_w}] W")


@dataclass(frozen=True)
class EnergyRecord:
    payload_bits: float
    rate_bps: float
    delay_s: float
    energy_j: float


def uplink_rate(budget):
    """Shannon rate ``B * log2(1 + snr_linear)`` in bits/s."""
    return budget.bandwidth_hz * math.log2(1.0 + snr_db_to_linear(budget.snr_db))


def transmission_delay(payload_bits, rate_bps):
    if rate_bps <= 0:
        raise UndefinedLinkError("link rate is zero; delay undefined")
    if payload_bits < 0:
        raise ContractError("payload must be non-negative")
    return payload_bits / rate_bps


def comm_energy(power_w, delay_s):
    if power_w < 0 or delay_s < 0:
        raise ContractError("power and delay must be non-negative")
    return power_w * delay_s


def model_payload_bits(params, bits_per_weight=32, bitmap_overhead=False):
    """Bits to upload a masked parameter set: active weights times width.

    With ``bitmap_overhead`` one extra bit per position (active or not)
    encodes the sparsity pattern.
    """
    if bits_per_weight not in BITS_PER_WEIGHT:
        raise ContractError(f"bits_per_weight must be one of {BITS_PER_WEIGHT}")
    bits = params.active_count() * bits_per_weight
    if bitmap_overhead:
        bits += params.size()
    return bits


def upload(payload_bits, budget):
    rate = uplink_rate(budget)
    delay = transmission_delay(payload_bits, rate)
    return EnergyRecord(payload_bits, rate, delay, comm_energy(budget.power_w, delay))
