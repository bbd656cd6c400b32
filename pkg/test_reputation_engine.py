"""
RepStream - Reputation Engine Tests
Aggregation against a scalar oracle, decay, fixed points and replica resolution
"""

import math

import numpy as np
import pytest

from src.config import DEFAULT_ALPHA
from src.core_model import Reputation
from src.errors import ClockViolation, NoDataError, NonContractiveError
from src.reputation_engine import (
    DecayParams, RepReport, aggregate, decay_curve, decay_only, fixed_point,
    iterate_to_fixed_point, resolve_replicas,
)


def oracle(prev: float, r_r: float, alpha_tau: float) -> float:
    return (prev * math.exp(-alpha_tau) + r_r) / (1.0 + r_r)


# ===========================
# Aggregation
# ===========================
def test_aggregate_matches_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        prev = float(rng.uniform(0, 1))
        r_r = float(rng.uniform(0, 1))
        alpha = float(rng.uniform(1e-6, 1e-3))
        tau = int(rng.integers(0, 20000))
        result = aggregate(Reputation(prev, 100), RepReport(1, r_r, 2, 100 + tau), 100 + tau, DecayParams(alpha))
        expected = oracle(prev, r_r, alpha * tau)
        assert result.updated_at == 100 + tau
        assert abs(result.value - expected) <= 1e-12 * max(expected, 1e-300)


def test_aggregate_stays_in_range():
    rng = np.random.default_rng(7)
    prevs = rng.uniform(0, 1, size=100_000)
    reports = rng.uniform(0, 1, size=100_000)
    taus = rng.integers(0, 1_000_000, size=100_000)
    params = DecayParams(DEFAULT_ALPHA)
    for prev, r_r, tau in zip(prevs, reports, taus):
        value = aggregate(Reputation(float(prev), 0), RepReport(1, float(r_r), 2, int(tau)), int(tau), params).value
        assert 0.0 <= value <= 1.0


def test_aggregate_example():
    params = DecayParams(1e-4)
    result = aggregate(Reputation(0.5, 0), RepReport(1, 0.8, 2, 1000), 1000, params)
    assert result.value == pytest.approx(0.69579, abs=1e-5)


def test_aggregate_rejects_time_travel():
    with pytest.raises(ClockViolation):
        aggregate(Reputation(0.5, 100), RepReport(1, 0.5, 2, 50), 50, DecayParams())


def test_report_range():
    with pytest.raises(ValueError):
        RepReport(1, 1.2, 2, 0)


def test_decay_params_reject_non_positive_alpha():
    with pytest.raises(ValueError):
        DecayParams(0.0)


# ===========================
# Decay
# ===========================
def test_decay_only_is_aggregate_with_zero_report():
    params = DecayParams()
    prev = Reputation(0.73, 10)
    assert decay_only(prev, 5000, params) == aggregate(prev, RepReport(1, 0.0, 2, 5000), 5000, params)


def test_free_rider_decay_closed_form():
    params = DecayParams()
    start = Reputation(0.5, 0)
    for t in (0, 1000, 10_000, 120_000):
        assert decay_only(start, t, params).value == pytest.approx(0.5 * math.exp(-params.alpha * t), abs=1e-12)


def test_default_alpha_is_ten_percent_per_second():
    assert DecayParams().decay_per_round(1000) == pytest.approx(0.9, rel=1e-12)


def test_decay_curve_ordering():
    times = np.arange(0, 60001, 1000)
    low = decay_curve(0.5, 1e-4, times)
    high = decay_curve(0.5, 2e-4, times)
    assert low[0] == high[0] == 0.5
    assert np.all(high[1:] < low[1:])


# ===========================
# Fixed points
# ===========================
@pytest.mark.parametrize('r_r', [0.0, 0.25, 0.5, 0.75, 1.0])
@pytest.mark.parametrize('d', [0.5, 0.9, 0.99])
def test_iteration_reaches_fixed_point(r_r, d):
    value, rounds = iterate_to_fixed_point(r_r, d, start=0.5)
    assert rounds <= 2000
    assert abs(value - fixed_point(r_r, d)) <= 1e-9


def test_fixed_point_examples():
    assert fixed_point(1.0, 0.9) == pytest.approx(1 / 1.1)
    assert fixed_point(0.0, 0.9) == 0.0


def test_fixed_point_requires_contraction():
    with pytest.raises(NonContractiveError):
        fixed_point(0.0, 1.0)


# ===========================
# Replica resolution
# ===========================
def test_median_resolution():
    assert resolve_replicas([0.2, 0.9, 0.4]) == 0.4
    assert resolve_replicas([0.7, 0.1]) == 0.1
    assert resolve_replicas([0.6]) == 0.6


def test_median_resolution_takes_arrays_and_returns_a_float():
    value = resolve_replicas(np.array([0.9, 0.3, 0.5]))
    assert isinstance(value, float)
    assert value == 0.5
    assert resolve_replicas(np.array([0.8, 0.2, 0.6, 0.4]), expected_count=4) == 0.4


def test_median_resolution_errors():
    with pytest.raises(NoDataError):
        resolve_replicas([])
    with pytest.raises(ValueError):
        resolve_replicas([0.1, 0.2, 0.3, 0.4], expected_count=3)


def test_single_byzantine_replica_cannot_move_median():
    grid = [round(0.1 * i, 1) for i in range(11)]
    for honest in grid:
        for adversary in (0.0, 0.25, 0.5, 0.75, 1.0):
            for order in ([honest, honest, adversary], [adversary, honest, honest], [honest, adversary, honest]):
                assert resolve_replicas(order) == honest


def test_byzantine_median_stays_between_honest_values():
    grid = [round(0.1 * i, 1) for i in range(11)]
    for low in grid:
        for high in grid:
            if high < low:
                continue
            for adversary in (0.0, 0.25, 0.5, 0.75, 1.0):
                assert low <= resolve_replicas([low, high, adversary]) <= high
