import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfl.energy import (
    LinkBudget, comm_energy, model_payload_bits, transmission_delay, upload, uplink_rate,
)
from psfl.errors import ContractError, UndefinedLinkError
from psfl.models import FULL_SCALE_PARAMS
from psfl.params import ParameterSet


def _run(row):
    i = row["inputs"]
    op = i["op"]
    if op == "rate":
        return uplink_rate(LinkBudget(i["bandwidth_hz"], 0.1, i["snr_db"]))
    if op == "delay":
        return transmission_delay(i["payload_bits"], i["rate_bps"])
    if op == "energy":
        return comm_energy(i["power_w"], i["delay_s"])
    if op == "payload":
        return i["active"] * i["bits_per_weight"]
    raise KeyError(op)


def test_energy_table(oracle_rows):
    for row in oracle_rows("energy"):
        assert _run(row) == pytest.approx(row["expected"], rel=1e-12), row["case"]


def test_payload_counts_active_weights():
    p = ParameterSet({"a": np.ones((10, 10)), "b": np.ones(5)}, prunable=["a"])
    assert model_payload_bits(p) == 105 * 32
    mask = p.flat_mask()
    mask[:50] = False
    p.set_flat_mask(mask)
    assert model_payload_bits(p) == 55 * 32
    assert model_payload_bits(p, 16) == 55 * 16
    assert model_payload_bits(p, bitmap_overhead=True) == 55 * 32 + 105
    with pytest.raises(ContractError):
        model_payload_bits(p, 8)


def test_full_scale_csc_upload_energy():
    # 54,721,065 weights at 32 bits over 1 MHz at 10 dB with 0.1 W
    rec = upload(FULL_SCALE_PARAMS["CSC"] * 32, LinkBudget(1e6, 0.1, 10.0))
    assert rec.rate_bps == pytest.approx(1e6 * math.log2(11))
    assert rec.delay_s == pytest.approx(FULL_SCALE_PARAMS["CSC"] * 32 / rec.rate_bps)
    assert rec.energy_j == pytest.approx(0.1 * rec.delay_s)


def test_zero_rate_is_undefined():
    with pytest.raises(UndefinedLinkError):
        transmission_delay(100, 0.0)


def test_invalid_inputs():
    with pytest.raises(ContractError):
        LinkBudget(0.0, 0.1, 10.0)
    with pytest.raises(ContractError):
        LinkBudget(1e6, 0.2, 10.0)
    with pytest.raises(ContractError):
        transmission_delay(-1, 10.0)
    with pytest.raises(ContractError):
        comm_energy(-0.1, 1.0)


snr = st.floats(-10, 40)
bits = st.floats(1.0, 1e9)


@given(snr, snr, bits)
def test_energy_decreases_with_snr(a, b, z):
    lo, hi = sorted((a, b))
    e_lo = upload(z, LinkBudget(1e6, 0.1, lo)).energy_j
    e_hi = upload(z, LinkBudget(1e6, 0.1, hi)).energy_j
    assert e_hi <= e_lo


@given(snr, bits, bits)
def test_energy_increases_with_payload(s, a, b):
    lo, hi = sorted((a, b))
    budget = LinkBudget(1e6, 0.1, s)
    assert upload(lo, budget).energy_j <= upload(hi, budget).energy_j


@given(snr, bits, st.floats(1e3, 1e8), st.floats(0.001, 0.1))
def test_dimensional_consistency(s, z, bw, pw):
    # joules = watts * bits / (bits per second); doubling bandwidth halves energy
    rec = upload(z, LinkBudget(bw, pw, s))
    assert rec.energy_j == pytest.approx(pw * z / rec.rate_bps, rel=1e-12)
    rec2 = upload(z, LinkBudget(2 * bw, pw, s))
    assert rec2.energy_j == pytest.approx(rec.energy_j / 2, rel=1e-12)
