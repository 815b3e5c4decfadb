import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfl.autodiff import Tensor, gradients, square, tsum
from psfl.channel import (
    POWER_FLOOR, ChannelRealization, awgn_transmit, empirical_snr_db, sample_schedule,
    snr_db_to_linear, snr_linear_to_db,
)
from psfl.errors import ContractError
from psfl.models import build_model, desk_profile


def test_db_conversion_examples():
    assert snr_db_to_linear(0.0) == 1.0
    assert snr_db_to_linear(10.0) == pytest.approx(10.0, rel=1e-15)
    assert snr_db_to_linear(25.0) == pytest.approx(316.22776601683796, rel=1e-14)


@given(st.floats(-30, 60))
def test_db_roundtrip(db):
    assert snr_linear_to_db(snr_db_to_linear(db)) == pytest.approx(db, abs=1e-9)


def test_infinite_snr_is_noiseless():
    x = np.random.default_rng(0).standard_normal((4, 8))
    y = awgn_transmit(x, math.inf, np.random.default_rng(1))
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize("target", [0, 5, 10, 15, 20, 25])
def test_empirical_snr_within_half_db(target):
    rng = np.random.default_rng(target)
    x = rng.standard_normal((1, 100_000))
    y = awgn_transmit(x, float(target), np.random.default_rng(100 + target)).data
    assert abs(empirical_snr_db(x, y) - target) < 0.5


def test_noise_is_unbiased():
    x = np.full((1, 100_000), 2.0)
    y = awgn_transmit(x, 0.0, np.random.default_rng(3)).data
    sigma = math.sqrt(4.0)  # power 4 at 0 dB
    assert abs((y - x).mean()) < 3 * sigma / math.sqrt(x.size)


def test_noise_is_per_row_power():
    x = np.vstack([np.ones(50_000), 10 * np.ones(50_000)])
    y = awgn_transmit(x, 10.0, np.random.default_rng(4)).data
    for row in range(2):
        assert abs(empirical_snr_db(x[row], y[row]) - 10.0) < 0.5


def test_zero_signal_uses_power_floor():
    x = np.zeros((1, 1000))
    y = awgn_transmit(x, 0.0, np.random.default_rng(0)).data
    assert np.all(np.isfinite(y))
    assert np.std(y) == pytest.approx(math.sqrt(POWER_FLOOR), rel=0.1)


def test_non_finite_signal_rejected():
    with pytest.raises(ContractError):
        awgn_transmit(np.array([[1.0, np.nan]]), 10.0, np.random.default_rng(0))


def test_gradient_passes_straight_through():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)), requires_grad=True)
    y = awgn_transmit(x, 5.0, np.random.default_rng(1))
    g = gradients(tsum(square(y)), {"x": x})["x"]
    np.testing.assert_allclose(g, 2 * y.data, rtol=1e-15)


def test_zero_noise_gradient_matches_noiseless():
    model = build_model(desk_profile("CSC"), seed=0)
    x = np.random.default_rng(2).uniform(size=(2, 16, 16, 1))
    quiet = ChannelRealization(10.0, np.zeros((2, 32)))
    names = model.params.tensors
    g_quiet = gradients(tsum(model.forward(x, quiet).m_hat), names)
    g_clean = gradients(tsum(model.forward(x).m_hat), names)
    for n in names:
        np.testing.assert_array_equal(g_quiet[n], g_clean[n])


def test_noise_redrawn_for_each_transmission():
    rng = np.random.default_rng(0)
    x = np.ones((2, 4))
    a, b = awgn_transmit(x, 0.0, rng).data, awgn_transmit(x, 0.0, rng).data
    assert not np.array_equal(a, b)
    assert not np.array_equal(a[0], a[1])


def test_schedule_degenerate_interval():
    s = sample_schedule(5, 3, 10.0, 10.0, seed=0)
    assert np.all(s.draws == 10.0)


def test_schedule_is_reproducible():
    a, b = sample_schedule(30, 9, 0, 25, seed=4), sample_schedule(30, 9, 0, 25, seed=4)
    assert np.array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, sample_schedule(30, 9, 0, 25, seed=5).draws)
    assert a.rounds == 30 and a.clients == 9
    assert a.round_mean(0) == pytest.approx(a.draws[0].mean())


def test_schedule_mean_and_range():
    s = sample_schedule(100, 100, 0.0, 25.0, seed=1)
    assert s.draws.min() >= 0 and s.draws.max() <= 25
    assert abs(s.draws.mean() - 12.5) < 0.3


def test_schedule_bad_bounds():
    with pytest.raises(ContractError):
        sample_schedule(2, 2, 20, 10, seed=0)
