"""
RepStream - Reputation Engine
Aggregation with exponential decay, the free-rider decay case, fixed-point analysis
and median resolution across replicas
"""

import math
import logging
import numpy as np
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

from src.config import DEFAULT_ALPHA
from src.core_model import Reputation
from src.errors import ClockViolation, NoDataError, NonContractiveError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecayParams:
    """Decay factor alpha in 1/ms; tau is taken from timestamps per update."""
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    def decay_per_round(self, round_ms: float) -> float:
        """Multiplicative decay over one round of the given length."""
        return math.exp(-self.alpha * round_ms)


@dataclass(frozen=True)
class RepReport:
    """Report about a target peer; reported_value is the R_r mass."""
    target: int
    reported_value: float
    reporter: int
    at: int

    def __post_init__(self):
        if not 0.0 <= self.reported_value <= 1.0:
            raise ValueError(f"reported value {self.reported_value} outside [0, 1]")


def _elapsed(previous: Reputation, now: int) -> int:
    tau = now - previous.updated_at
    if tau < 0:
        raise ClockViolation(f"update at {now} precedes last update at {previous.updated_at}")
    return tau


def _combine(value: float, tau: int, r_r: float, alpha: float) -> float:
    return (value * math.exp(-alpha * tau) + r_r) / (1.0 + r_r)


def aggregate(previous: Reputation, report: RepReport, now: int, params: DecayParams) -> Reputation:
    """
    Fold one report into a reputation.

    R(t) = (R(t - tau) * e^(-alpha * tau) + R_r) / (1 + R_r)

    Args:
        previous: Last stored reputation
        report: Incoming report; its reported_value is R_r
        now: Current simulation time (ms)
        params: Decay parameters

    Returns:
        New reputation stamped at now

    Raises:
        ClockViolation: now precedes previous.updated_at
    """
    tau = _elapsed(previous, now)
    return Reputation(_combine(previous.value, tau, report.reported_value, params.alpha), now)


def decay_only(previous: Reputation, now: int, params: DecayParams) -> Reputation:
    """
    Decay a reputation with no incoming report (R_r = 0).

    Shares the aggregation arithmetic so both agree bit-for-bit.

    Raises:
        ClockViolation: now precedes previous.updated_at
    """
    tau = _elapsed(previous, now)
    return Reputation(_combine(previous.value, tau, 0.0, params.alpha), now)


def fixed_point(r_r: float, decay_per_round: float) -> float:
    """
    Steady-state reputation under a constant report each round.

    Args:
        r_r: Report mass per round, in [0, 1]
        decay_per_round: d = e^(-alpha * round), in (0, 1]

    Returns:
        R* = R_r / (1 + R_r - d)

    Raises:
        NonContractiveError: 1 + R_r - d <= 0
    """
    denominator = 1.0 + r_r - decay_per_round
    if denominator <= 0:
        raise NonContractiveError(f"no fixed point for R_r={r_r}, d={decay_per_round}")
    return r_r / denominator


def iterate_to_fixed_point(r_r: float, decay_per_round: float, start: float = 0.5,
                           tolerance: float = 1e-9, max_rounds: int = 2000) -> Tuple[float, int]:
    """
    Apply the aggregation round by round until it settles.

    Returns:
        (final value, rounds used); rounds == max_rounds means it did not settle
    """
    target = fixed_point(r_r, decay_per_round)
    value = start
    for rounds in range(1, max_rounds + 1):
        value = (value * decay_per_round + r_r) / (1.0 + r_r)
        if abs(value - target) <= tolerance:
            return value, rounds
    return value, max_rounds


def resolve_replicas(values: Sequence[float], expected_count: int = 3) -> float:
    """
    Combine replica answers by median (lower median for even counts).

    Args:
        values: Values reported by the reachable replica holders
        expected_count: Replica count the caller addressed

    Returns:
        Median value

    Raises:
        NoDataError: values is empty
    """
    answers = np.asarray(values, dtype=float)
    if answers.size == 0:
        raise NoDataError("no replica answered")
    if answers.size > expected_count:
        raise ValueError(f"{answers.size} answers for {expected_count} replicas")
    return float(np.quantile(answers, 0.5, method='lower'))


def decay_curve(initial: float, alpha: float, times_ms: Iterable[float]) -> np.ndarray:
    """Closed-form free-rider curve initial * e^(-alpha * t) over a time grid."""
    times = np.asarray(list(times_ms), dtype=float)
    return initial * np.exp(-alpha * times)
