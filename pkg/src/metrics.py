"""
RepStream - Metrics
In-memory metrics log of a simulation run, topology checks, payoff summary
and the CSV/JSON writers used by the harness
"""

import csv
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from src.config import EXPULSION_THRESHOLD
from src.errors import ProtocolViolation

logger = logging.getLogger(__name__)


@dataclass
class PeerInfo:
    policy: str
    role: str
    joined_at: int
    departed_at: Optional[int] = None


@dataclass(frozen=True)
class Recovery:
    peer: int
    lost_at: int
    attached_at: int

    @property
    def duration_ms(self) -> int:
        return self.attached_at - self.lost_at


@dataclass
class MetricsLog:
    """Everything a run produces; writers below turn it into files."""
    scenario: str = ''
    seed: int = 0
    duration_ms: int = 0
    source: Optional[int] = None
    peers: Dict[int, PeerInfo] = field(default_factory=dict)
    reputation_series: List[Tuple[int, int, float]] = field(default_factory=list)
    depth_series: List[Tuple[int, int, int]] = field(default_factory=list)
    topology_snapshots: List[Tuple[int, Tuple[Tuple[int, int], ...]]] = field(default_factory=list)
    chunk_stats: Dict[int, Dict[str, float]] = field(default_factory=dict)
    message_counters: Counter = field(default_factory=Counter)
    counters: Counter = field(default_factory=Counter)
    report_outcomes: Counter = field(default_factory=Counter)
    first_attached: Dict[int, int] = field(default_factory=dict)
    recoveries: List[Recovery] = field(default_factory=list)
    open_losses: Dict[int, int] = field(default_factory=dict)
    departures: List[Tuple[int, int, str]] = field(default_factory=list)
    orphans: Dict[int, int] = field(default_factory=dict)
    max_children_seen: int = 0
    final_reputation: Dict[int, float] = field(default_factory=dict)
    final_parents: Dict[int, Optional[int]] = field(default_factory=dict)
    final_children: Dict[int, int] = field(default_factory=dict)
    trace_hash: str = ''

    # ===========================
    # Recording
    # ===========================
    def record_event(self, kind: str, /, **fields):
        """Observer hook handed to every peer."""
        self.counters[f"event_{kind}"] += 1
        if kind == 'report':
            reporter = self.peers.get(fields['reporter'])
            label = reporter.policy if reporter else 'unknown'
            self.report_outcomes[(label, fields['kind'].value, fields['outcome'].value)] += 1
        elif kind == 'parent_lost':
            self.open_losses.setdefault(fields['peer'], fields['at'])
        elif kind == 'attached':
            self.first_attached.setdefault(fields['peer'], fields['at'])
            lost_at = self.open_losses.pop(fields['peer'], None)
            if lost_at is not None:
                self.recoveries.append(Recovery(fields['peer'], lost_at, fields['at']))

    def record_sample(self, now: int, reputations: Mapping[int, float],
                      parents: Mapping[int, Optional[int]], children: Mapping[int, int]):
        """Append one snapshot after checking that the overlay is still a forest."""
        depths = check_forest(parents, self.source)
        for peer in sorted(reputations):
            self.reputation_series.append((now, peer, reputations[peer]))
        for peer in sorted(depths):
            self.depth_series.append((now, peer, depths[peer]))
        edges = tuple(sorted((c, p) for c, p in parents.items() if p is not None))
        self.topology_snapshots.append((now, edges))
        if children:
            self.max_children_seen = max(self.max_children_seen, max(children.values()))

    # ===========================
    # Queries
    # ===========================
    def series_of(self, peer: int) -> List[Tuple[int, float]]:
        return [(t, v) for t, p, v in self.reputation_series if p == peer]

    def peers_with_policy(self, policy: str, live_only: bool = True) -> List[int]:
        return sorted(p for p, info in self.peers.items()
                      if info.policy == policy and info.role == 'subscriber'
                      and (not live_only or info.departed_at is None))

    def attached(self, peer: int) -> bool:
        return self.final_parents.get(peer) is not None

    def recovery_of(self, peer: int) -> Optional[Recovery]:
        for recovery in self.recoveries:
            if recovery.peer == peer:
                return recovery
        return None


# ===========================
# Topology checks
# ===========================
def check_forest(parents: Mapping[int, Optional[int]], root: Optional[int]) -> Dict[int, int]:
    """
    Verify that parent links contain no cycle.

    Args:
        parents: child -> parent (None when detached)
        root: The source

    Returns:
        Depth below the source for every peer; -1 for peers in a detached fragment

    Raises:
        ProtocolViolation: a parent chain loops
    """
    depths: Dict[int, int] = {}
    if root is not None:
        depths[root] = 0
    for start in parents:
        chain = []
        seen = set()
        node = start
        while node is not None and node not in depths:
            if node in seen:
                raise ProtocolViolation(f"parent cycle through {node:#x}")
            seen.add(node)
            chain.append(node)
            node = parents.get(node)
        base = -1 if node is None else depths[node]
        for offset, peer in enumerate(reversed(chain), start=1):
            depths[peer] = -1 if base < 0 else base + offset
    return depths


# ===========================
# Payoff
# ===========================
def payoff_summary(log: MetricsLog) -> Dict[str, Dict[str, float]]:
    """
    Measured payoff per policy class.

    mean_reputation: mean final reputation of live peers
    inclusion_fraction: feeder reports aggregated / feeder reports received by holders
    detached_fraction: live peers without a parent at the end
    leaf_or_detached_fraction: live peers feeding no child at the end
    expelled_fraction: live peers whose final reputation fell below the expulsion threshold
    """
    summary = {}
    labels = sorted({info.policy for info in log.peers.values() if info.role == 'subscriber'})
    for label in labels:
        members = log.peers_with_policy(label)
        values = np.array([log.final_reputation[p] for p in members if p in log.final_reputation])
        included = log.report_outcomes[(label, 'feeder', 'included')]
        excluded = log.report_outcomes[(label, 'feeder', 'excluded')] + log.report_outcomes[(label, 'feeder', 'malformed')]
        total = included + excluded
        summary[label] = {
            'count': len(members),
            'mean_reputation': float(values.mean()) if values.size else 0.0,
            'inclusion_fraction': included / total if total else 0.0,
            'detached_fraction': (sum(1 for p in members if not log.attached(p)) / len(members)) if members else 0.0,
            'expelled_fraction': float((values < EXPULSION_THRESHOLD).mean()) if values.size else 0.0,
            'leaf_or_detached_fraction': (sum(1 for p in members if log.final_children.get(p, 0) == 0)
                                          / len(members)) if members else 0.0,
        }
    return summary


def conservation_holds(log: MetricsLog) -> bool:
    c = log.counters
    return c['sent'] == c['delivered'] + c['dropped_departed'] + c['dropped_random'] + c['in_flight']


# ===========================
# Writers
# ===========================
def write_metrics_csv(log: MetricsLog, path: str):
    """Long format: time,peer,metric,value, ordered by time."""
    rows = [(t, p, 'reputation', repr(v)) for t, p, v in log.reputation_series]
    rows += [(t, p, 'depth', str(d)) for t, p, d in log.depth_series]
    end = log.duration_ms
    for peer in sorted(log.chunk_stats):
        for metric, value in log.chunk_stats[peer].items():
            rows.append((end, peer, metric, repr(value)))
    rows.sort(key=lambda r: r[0])
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['time', 'peer', 'metric', 'value'])
        for t, peer, metric, value in rows:
            writer.writerow([t, f"{peer:#018x}", metric, value])


def read_metrics_csv(path: str) -> List[Tuple[int, int, str, float]]:
    with open(path, newline='') as f:
        return [(int(r['time']), int(r['peer'], 16), r['metric'], float(r['value']))
                for r in csv.DictReader(f)]


def write_topology_csv(log: MetricsLog, path: str):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['time', 'child', 'parent'])
        for t, edges in log.topology_snapshots:
            for child, parent in edges:
                writer.writerow([t, f"{child:#018x}", f"{parent:#018x}"])


PAYOFF_COLUMNS = ['policy', 'mean_reputation', 'inclusion_fraction', 'detached_fraction',
                  'leaf_or_detached_fraction', 'expelled_fraction', 'count']


def write_payoff_csv(summary: Mapping[str, Mapping[str, float]], path: str):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(PAYOFF_COLUMNS)
        for policy in sorted(summary):
            row = summary[policy]
            writer.writerow([policy] + [row[c] for c in PAYOFF_COLUMNS[1:]])


def write_alpha_sweep_csv(curves: Mapping[float, np.ndarray], times: Iterable[float], path: str):
    times = list(times)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['alpha', 'time', 'value'])
        for alpha in sorted(curves):
            for t, value in zip(times, curves[alpha]):
                writer.writerow([repr(alpha), int(t), repr(float(value))])


def build_summary(log: MetricsLog, parameters: Mapping, pins: Optional[Mapping] = None) -> Dict:
    recoveries = [r.duration_ms for r in log.recoveries]
    return {
        'scenario': log.scenario,
        'seed': log.seed,
        'duration_ms': log.duration_ms,
        'trace_hash': log.trace_hash,
        'parameters': dict(parameters),
        'payoff_summary': payoff_summary(log),
        'message_counters': dict(sorted(log.message_counters.items())),
        'counters': dict(sorted(log.counters.items())),
        'max_children_seen': log.max_children_seen,
        'recovery_ms': {
            'count': len(recoveries),
            'max': max(recoveries) if recoveries else None,
            'mean': float(np.mean(recoveries)) if recoveries else None,
        },
        'regression_pins': {
            'note': 'self-generated regression pins, not published results',
            **(pins or {}),
        },
    }


def write_summary_json(summary: Mapping, path: str):
    with open(path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)


def write_run_outputs(log: MetricsLog, out_dir: str, parameters: Mapping,
                      pins: Optional[Mapping] = None) -> Dict:
    """Write metrics.csv, topology.csv and summary.json; returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(log, os.path.join(out_dir, 'metrics.csv'))
    write_topology_csv(log, os.path.join(out_dir, 'topology.csv'))
    summary = build_summary(log, parameters, pins)
    write_summary_json(summary, os.path.join(out_dir, 'summary.json'))
    logger.info(f"✓ Results written to {out_dir}")
    return summary
