"""
RepStream - Scenario Loader
Parses scenario JSON files into ScenarioSpec and validates them with
line-anchored messages
"""

import json
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

from src import config
from src.errors import ScenarioError
from src.peer_node import BehaviorKind, ProtocolSettings, ReportStrategy
from src.reputation_engine import DecayParams
from src.simnet import Arrival, ChurnSchedule, Departure, FlashCrowd, LatencyConfig, DEPARTURE_RULES

logger = logging.getLogger(__name__)

KNOWN_FIELDS = {
    'name', 'duration_ms', 'seed', 'sources', 'fanout', 'alpha', 'beacon_period_ms',
    'chunk_period_ms', 'join_timeout_ms', 'keepalive_timeout_ms', 'peers', 'latency',
    'churn', 'flash_crowd', 'join_spread_ms', 'drop_probability', 'malicious_holders',
    'sample_period_ms', 'stream_end_ms', 'session',
}

DEFAULT_SESSION = {
    'title': 'RepStream test session',
    'speaker': 'RepStream',
    'date': '2026-01-01',
    'time': '10:00',
}


@dataclass(frozen=True)
class PeerPopulation:
    count: int = 0
    mix: Dict[str, float] = field(default_factory=lambda: {'altruistic': 1.0})
    malicious_strategy: str = ReportStrategy.ALWAYS_ZERO.value

    def policy_names(self) -> List[str]:
        """Mix entries as policy strings understood by BehaviorPolicy.parse."""
        return [f"{name}:{self.malicious_strategy}" if name == BehaviorKind.MALICIOUS.value else name
                for name in self.mix]


@dataclass(frozen=True)
class ScenarioSpec:
    """Validated scenario; every field has a default taken from src.config."""
    name: str = 'scenario'
    duration_ms: int = config.DEFAULT_DURATION_MS
    seed: int = config.DEFAULT_SEED
    sources: int = 1
    fanout: int = config.FANOUT
    alpha: float = config.DEFAULT_ALPHA
    beacon_period_ms: int = config.BEACON_PERIOD_MS
    chunk_period_ms: int = config.CHUNK_PERIOD_MS
    join_timeout_ms: int = config.JOIN_TIMEOUT_MS
    keepalive_timeout_ms: int = config.KEEPALIVE_TIMEOUT_MS
    peers: PeerPopulation = field(default_factory=PeerPopulation)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    churn: ChurnSchedule = field(default_factory=ChurnSchedule)
    join_spread_ms: int = config.JOIN_SPREAD_MS
    drop_probability: float = config.DROP_PROBABILITY
    malicious_holders: bool = False
    sample_period_ms: int = config.SAMPLE_PERIOD_MS
    stream_end_ms: Optional[int] = None
    session: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SESSION))

    def settings(self) -> ProtocolSettings:
        return ProtocolSettings(
            fanout=self.fanout,
            beacon_period_ms=self.beacon_period_ms,
            chunk_period_ms=self.chunk_period_ms,
            join_timeout_ms=self.join_timeout_ms,
            keepalive_timeout_ms=self.keepalive_timeout_ms,
            malicious_holders=self.malicious_holders,
        )

    def decay_params(self) -> DecayParams:
        return DecayParams(self.alpha)

    def total_peers(self) -> int:
        """Source, initial peers and every scheduled arrival."""
        arrivals = sum(a.count for a in self.churn.arrivals)
        crowd = self.churn.flash_crowd.count if self.churn.flash_crowd else 0
        return 1 + self.peers.count + arrivals + crowd

    def with_overrides(self, seed: Optional[int] = None, duration_ms: Optional[int] = None) -> 'ScenarioSpec':
        changes = {}
        if seed is not None:
            changes['seed'] = seed
        if duration_ms is not None:
            if duration_ms <= 0:
                raise ScenarioError([f"--duration-ms must be > 0, got {duration_ms}"])
            changes['duration_ms'] = duration_ms
        return replace(self, **changes) if changes else self


# ===========================
# Validation helpers
# ===========================
class _Checker:
    """Collects errors, each anchored to the line where its key appears."""

    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.errors: List[str] = []

    def line_of(self, key: str) -> int:
        needle = f'"{key}"'
        for number, line in enumerate(self.lines, start=1):
            if needle in line:
                return number
        return 1

    def error(self, key: str, message: str):
        self.errors.append(f"line {self.line_of(key)}: {message}")

    def integer(self, data: Dict, key: str, default: int, minimum: int = 0, strict: bool = False) -> int:
        value = data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            self.error(key, f"{key} must be an integer, got {value!r}")
            return default
        if value < minimum or (strict and value == minimum):
            bound = f"> {minimum}" if strict else f">= {minimum}"
            self.error(key, f"{key} must be {bound}, got {value}")
        return value

    def number(self, data: Dict, key: str, default: float) -> float:
        value = data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.error(key, f"{key} must be a number, got {value!r}")
            return default
        return float(value)

    def objects(self, data: Dict, key: str) -> List[Dict]:
        """List of JSON objects under `key`; anything else is reported and skipped."""
        value = data.get(key, [])
        if not isinstance(value, list):
            self.error(key, f"{key} must be a list of objects, got {value!r}")
            return []
        items = []
        for index, item in enumerate(value):
            if isinstance(item, dict):
                items.append(item)
            else:
                self.error(key, f"{key}[{index}] must be an object, got {item!r}")
        return items


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_mix(checker: _Checker, raw: Dict) -> PeerPopulation:
    count = checker.integer(raw, 'count', 0)
    mix = raw.get('mix', {'altruistic': 1.0})
    if not isinstance(mix, dict) or not mix:
        checker.error('mix', "mix must be a non-empty object of policy fractions")
        mix = {'altruistic': 1.0}
    known = {k.value for k in BehaviorKind}
    clean = {}
    for name, fraction in mix.items():
        if name not in known:
            checker.error(name, f"unknown policy {name!r}; expected one of {sorted(known)}")
            continue
        if isinstance(fraction, bool) or not isinstance(fraction, (int, float)) or not 0 <= fraction <= 1:
            checker.error(name, f"fraction for {name} must be in [0, 1], got {fraction!r}")
            continue
        clean[name] = float(fraction)
    if clean and not math.isclose(sum(clean.values()), 1.0, abs_tol=1e-9):
        checker.error('mix', f"policy fractions must sum to 1, got {sum(clean.values()):.6g}")

    strategy = raw.get('malicious_strategy', ReportStrategy.ALWAYS_ZERO.value)
    if not isinstance(strategy, str) or strategy not in {s.value for s in ReportStrategy}:
        checker.error('malicious_strategy', f"unknown malicious strategy {strategy!r}")
        strategy = ReportStrategy.ALWAYS_ZERO.value
    return PeerPopulation(count, clean or {'altruistic': 1.0}, strategy)


def _parse_latency(checker: _Checker, raw: Dict, total_peers: int) -> LatencyConfig:
    mode = raw.get('mode', 'uniform')
    if mode == 'uniform':
        lo = checker.integer(raw, 'lo_ms', config.LATENCY_LO_MS, minimum=1)
        hi = checker.integer(raw, 'hi_ms', config.LATENCY_HI_MS, minimum=1)
        if hi < lo:
            checker.error('hi_ms', f"hi_ms must be >= lo_ms, got [{lo}, {hi}]")
        return LatencyConfig('uniform', lo_ms=lo, hi_ms=hi)

    if mode == 'matrix':
        matrix = raw.get('matrix')
        if not isinstance(matrix, list) or not all(isinstance(row, list) for row in matrix):
            checker.error('matrix', "matrix must be a list of rows")
            return LatencyConfig()
        n = len(matrix)
        if any(len(row) != n for row in matrix):
            checker.error('matrix', "matrix must be square")
            return LatencyConfig()
        if n < total_peers:
            checker.error('matrix', f"matrix covers {n} peers, scenario has {total_peers}")
        for i in range(n):
            for j in range(n):
                value = matrix[i][j]
                if i != j and (not _is_number(value) or value < 1):
                    checker.error('matrix', f"matrix[{i}][{j}] must be >= 1 ms, got {value!r}")
                    return LatencyConfig()
                if matrix[j][i] != value:
                    checker.error('matrix', f"matrix must be symmetric at [{i}][{j}]")
                    return LatencyConfig()
        return LatencyConfig('matrix', matrix=tuple(tuple(row) for row in matrix))

    if mode == 'coordinates':
        ms_per_unit = checker.number(raw, 'ms_per_unit', 1.0)
        if ms_per_unit <= 0:
            checker.error('ms_per_unit', f"ms_per_unit must be > 0, got {ms_per_unit}")
        positions = raw.get('positions')
        if positions is not None:
            if (not isinstance(positions, list)
                    or not all(isinstance(p, list) and len(p) == 2 for p in positions)):
                checker.error('positions', "positions must be a list of [x, y] pairs")
                positions = None
            elif not all(_is_number(c) for p in positions for c in p):
                checker.error('positions', "positions must hold numeric [x, y] coordinates")
                positions = None
            elif len(positions) < total_peers:
                checker.error('positions', f"{len(positions)} positions for {total_peers} peers")
        area = checker.number(raw, 'area', 100.0)
        if area <= 0:
            checker.error('area', f"area must be > 0, got {area}")
        return LatencyConfig('coordinates', ms_per_unit=ms_per_unit, area=area,
                             positions=tuple(tuple(p) for p in positions) if positions else None)

    checker.error('mode', f"latency mode must be uniform, matrix or coordinates, got {mode!r}")
    return LatencyConfig()


def _parse_churn(checker: _Checker, raw: Dict, duration: int, flash: Any) -> ChurnSchedule:
    arrivals = []
    for item in checker.objects(raw, 'arrivals'):
        at = checker.integer(item, 'at_ms', 0)
        count = checker.integer(item, 'count', 0)
        if not 0 <= at <= duration:
            checker.error('at_ms', f"arrival at {at} ms outside the scenario duration")
        mix = item.get('mix')
        if mix is not None:
            mix = _parse_mix(checker, {'mix': mix}).mix
        arrivals.append(Arrival(at, count, mix))

    departures = []
    for item in checker.objects(raw, 'departures'):
        at = checker.integer(item, 'at_ms', 0)
        if not 0 <= at <= duration:
            checker.error('at_ms', f"departure at {at} ms outside the scenario duration")
        rule = item.get('rule', 'random')
        base = rule.split(':', 1)[0] if isinstance(rule, str) else None
        if base not in DEPARTURE_RULES:
            checker.error('rule', f"departure rule must be one of {sorted(DEPARTURE_RULES)}, got {rule!r}")
        elif base == 'policy' and rule.partition(':')[2] not in {k.value for k in BehaviorKind}:
            checker.error('rule', f"departure rule {rule!r} names no known policy")
        count = item.get('count')
        fraction = item.get('fraction')
        if (count is None) == (fraction is None):
            checker.error('rule', "departure needs exactly one of count or fraction")
        elif count is not None:
            count = checker.integer(item, 'count', 0)
        elif isinstance(fraction, bool) or not isinstance(fraction, (int, float)) or not 0 < fraction <= 1:
            checker.error('fraction', f"fraction must be in (0, 1], got {fraction!r}")
        departures.append(Departure(at, rule, count, fraction))

    crowd = None
    if flash is not None:
        if not isinstance(flash, dict):
            checker.error('flash_crowd', "flash_crowd must be an object")
        else:
            at = checker.integer(flash, 'at_ms', 0)
            count = checker.integer(flash, 'count', 0)
            if not 0 <= at <= duration:
                checker.error('flash_crowd', f"flash crowd at {at} ms outside the scenario duration")
            crowd = FlashCrowd(at, count, checker.integer(flash, 'spread_ms', 0))
    return ChurnSchedule(tuple(arrivals), tuple(departures), crowd)


def _parse_session(checker: _Checker, raw: Any) -> Dict[str, str]:
    session = dict(DEFAULT_SESSION)
    if not isinstance(raw, dict):
        checker.error('session', f"session must be an object with {', '.join(DEFAULT_SESSION)}, got {raw!r}")
        return session
    for key, value in raw.items():
        if key not in DEFAULT_SESSION:
            checker.error(key, f"unknown session field {key!r}")
        elif not isinstance(value, str):
            checker.error(key, f"session {key} must be a string, got {value!r}")
        else:
            session[key] = value
    return session


# ===========================
# Public API
# ===========================
def parse_scenario(text: str, path: Optional[str] = None) -> ScenarioSpec:
    """
    Parse and validate scenario text.

    Args:
        text: JSON scenario text
        path: File name used in error messages

    Returns:
        ScenarioSpec

    Raises:
        ScenarioError: syntax or semantic violations, each with its line number
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError([f"line {e.lineno}: invalid JSON: {e.msg}"], path) from None
    if not isinstance(data, dict):
        raise ScenarioError(["line 1: scenario must be a JSON object"], path)

    checker = _Checker(text)
    for key in data:
        if key not in KNOWN_FIELDS:
            checker.error(key, f"unknown field {key!r}")

    duration = checker.integer(data, 'duration_ms', config.DEFAULT_DURATION_MS, minimum=0, strict=True)
    seed = checker.integer(data, 'seed', config.DEFAULT_SEED)
    sources = checker.integer(data, 'sources', 1)
    if sources != 1:
        checker.error('sources', f"exactly one source is required, got {sources}")
    fanout = checker.integer(data, 'fanout', config.FANOUT, minimum=1)

    alpha = checker.number(data, 'alpha', config.DEFAULT_ALPHA)
    if alpha <= 0:
        checker.error('alpha', f"alpha must be > 0, got {alpha}")

    periods = {}
    for key, default in (('beacon_period_ms', config.BEACON_PERIOD_MS),
                         ('chunk_period_ms', config.CHUNK_PERIOD_MS),
                         ('join_timeout_ms', config.JOIN_TIMEOUT_MS),
                         ('keepalive_timeout_ms', config.KEEPALIVE_TIMEOUT_MS),
                         ('sample_period_ms', config.SAMPLE_PERIOD_MS)):
        periods[key] = checker.integer(data, key, default, minimum=0, strict=True)

    peers_raw = data.get('peers', {})
    if not isinstance(peers_raw, dict):
        checker.error('peers', "peers must be an object with count and mix")
        peers_raw = {}
    peers = _parse_mix(checker, peers_raw)

    churn_raw = data.get('churn', {})
    if not isinstance(churn_raw, dict):
        checker.error('churn', "churn must be an object with arrivals and departures")
        churn_raw = {}
    churn = _parse_churn(checker, churn_raw, duration, data.get('flash_crowd'))

    malicious_holders = data.get('malicious_holders', False)
    if not isinstance(malicious_holders, bool):
        checker.error('malicious_holders', f"malicious_holders must be true or false, got {malicious_holders!r}")
        malicious_holders = False

    spec = ScenarioSpec(
        name=str(data.get('name', 'scenario')),
        duration_ms=duration,
        seed=seed,
        sources=sources,
        fanout=fanout,
        alpha=alpha if alpha > 0 else config.DEFAULT_ALPHA,
        peers=peers,
        churn=churn,
        join_spread_ms=checker.integer(data, 'join_spread_ms', config.JOIN_SPREAD_MS),
        drop_probability=checker.number(data, 'drop_probability', config.DROP_PROBABILITY),
        malicious_holders=malicious_holders,
        session=_parse_session(checker, data.get('session', {})),
        **periods,
    )
    if not 0 <= spec.drop_probability < 1:
        checker.error('drop_probability', f"drop_probability must be in [0, 1), got {spec.drop_probability}")

    stream_end = data.get('stream_end_ms')
    if stream_end is not None:
        stream_end = checker.integer(data, 'stream_end_ms', 0)
        if stream_end > duration:
            checker.error('stream_end_ms', f"stream_end_ms {stream_end} beyond duration {duration}")

    latency_raw = data.get('latency', {})
    if not isinstance(latency_raw, dict):
        checker.error('latency', "latency must be an object")
        latency_raw = {}
    latency = _parse_latency(checker, latency_raw, spec.total_peers())

    if checker.errors:
        raise ScenarioError(checker.errors, path)
    return replace(spec, latency=latency, stream_end_ms=stream_end)


def load_scenario(path: str) -> ScenarioSpec:
    """
    Read and validate a scenario file.

    Raises:
        ScenarioError: unreadable file or invalid content
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError([f"cannot read scenario: {e.strerror}"], path) from None
    spec = parse_scenario(text, path)
    logger.info(f"✓ Loaded scenario '{spec.name}' ({spec.peers.count} peers, {spec.duration_ms} ms)")
    return spec
