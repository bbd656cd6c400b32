"""
RepStream - Reputation DHT
Replica placement on the ring, reputation records, holder-side update handling,
reporter audits and the stream/layer registry
"""

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Mapping, MutableMapping, Optional, Sequence, Set, Tuple

from src.config import (
    REPLICAS, REPORTER_LOG_CAPACITY, INITIAL_REPUTATION, SOURCE_REPUTATION, AUDIT_TOLERANCE
)
from src.core_model import (
    LayerId, Reputation, ReportKind, StreamId, circular_distance, derive_reputation_layer,
    media_layer, replica_key
)
from src.errors import NoHoldersError, QueryTimeout, StreamConflict, StreamNotFound
from src.reputation_engine import DecayParams, RepReport, aggregate, decay_only, resolve_replicas

logger = logging.getLogger(__name__)


# ===========================
# Replica Placement
# ===========================
@dataclass(frozen=True)
class ReplicaSet:
    """Live peers closest to hash(subject), nearest first."""
    subject: int
    holders: Tuple[int, ...]


def locate_replicas(subject: int, live_peers: Iterable[int], replicas: int = REPLICAS) -> ReplicaSet:
    """
    Pick the replica holders of a subject by scanning every live peer.

    Args:
        subject: Peer whose record is placed
        live_peers: Current membership
        replicas: Copies to keep

    Returns:
        The min(replicas, |live|) closest peers, ties by PeerId

    Raises:
        NoHoldersError: no live peer
    """
    peers = set(live_peers)
    if not peers:
        raise NoHoldersError(f"no live peer to hold {subject:#x}")
    key = replica_key(subject)
    ranked = sorted(peers, key=lambda p: (circular_distance(key, p), p))
    return ReplicaSet(subject, tuple(ranked[:replicas]))


class ReplicaRing:
    """
    Sorted membership ring answering placement in O(log n).

    Agrees with locate_replicas on every input.
    """

    def __init__(self, peers: Iterable[int] = (), replicas: int = REPLICAS):
        self.replicas = replicas
        self._ring: List[int] = sorted(set(peers))

    def __len__(self) -> int:
        return len(self._ring)

    def __contains__(self, peer: int) -> bool:
        idx = bisect.bisect_left(self._ring, peer)
        return idx < len(self._ring) and self._ring[idx] == peer

    def members(self) -> List[int]:
        return list(self._ring)

    def add(self, peer: int):
        if peer not in self:
            bisect.insort(self._ring, peer)

    def remove(self, peer: int):
        idx = bisect.bisect_left(self._ring, peer)
        if idx < len(self._ring) and self._ring[idx] == peer:
            del self._ring[idx]

    def locate(self, subject: int) -> ReplicaSet:
        n = len(self._ring)
        if n == 0:
            raise NoHoldersError(f"no live peer to hold {subject:#x}")
        key = replica_key(subject)
        if n <= 2 * self.replicas:
            candidates = self._ring
        else:
            idx = bisect.bisect_left(self._ring, key)
            candidates = {self._ring[(idx + k) % n] for k in range(-self.replicas, self.replicas)}
        ranked = sorted(candidates, key=lambda p: (circular_distance(key, p), p))
        return ReplicaSet(subject, tuple(ranked[:self.replicas]))


# ===========================
# Records
# ===========================
@dataclass(frozen=True)
class ReporterEntry:
    reporter: int
    value: float
    at: int
    included: bool = True
    kind: ReportKind = ReportKind.FEEDER


@dataclass
class RepRecord:
    """Reputation of one subject as stored by one holder."""
    subject: int
    reputation: Reputation
    last_reporters: Deque[ReporterEntry] = field(
        default_factory=lambda: deque(maxlen=REPORTER_LOG_CAPACITY))
    pinned: bool = False

    def with_entry(self, reputation: Reputation, entry: ReporterEntry) -> 'RepRecord':
        log = deque(self.last_reporters, maxlen=self.last_reporters.maxlen)
        log.append(entry)
        return RepRecord(self.subject, reputation, log, self.pinned)

    def copy(self) -> 'RepRecord':
        return RepRecord(self.subject, self.reputation,
                         deque(self.last_reporters, maxlen=self.last_reporters.maxlen), self.pinned)


def seed_record(subject: int, now: int, pinned: bool = False) -> RepRecord:
    """Fresh record for a peer entering the network; the source is pinned."""
    value = SOURCE_REPUTATION if pinned else INITIAL_REPUTATION
    return RepRecord(subject, Reputation(value, now), pinned=pinned)


def current_value(record: RepRecord, now: int, params: DecayParams) -> float:
    """Value a holder reports at `now`: the stored value decayed to now."""
    if record.pinned:
        return record.reputation.value
    return decay_only(record.reputation, now, params).value


def apply_update(record: RepRecord, report: RepReport, now: int, params: DecayParams,
                 kind: ReportKind = ReportKind.FEEDER) -> RepRecord:
    """
    Fold a report into a record and log the reporter.

    Returns:
        New record; the input record is left untouched

    Raises:
        ValueError: report targets another subject
    """
    if report.target != record.subject:
        raise ValueError(f"report for {report.target:#x} applied to record of {record.subject:#x}")
    entry = ReporterEntry(report.reporter, report.reported_value, now, True, kind)
    if record.pinned:
        return record.with_entry(Reputation(record.reputation.value, now), entry)
    return record.with_entry(aggregate(record.reputation, report, now, params), entry)


def verify_report(reported_value: float, reporter_rep: float, tolerance: float = AUDIT_TOLERANCE) -> bool:
    """A report is believable when it matches the reporter's own reputation snapshot."""
    return abs(reported_value - reporter_rep) <= tolerance


class UpdateOutcome(Enum):
    INCLUDED = 'included'
    EXCLUDED = 'excluded'
    MALFORMED = 'malformed'


def receive_update(store: MutableMapping[int, RepRecord], subject: int, value: float, reporter: int,
                   reporter_rep: float, kind: ReportKind, now: int, params: DecayParams,
                   tolerance: float = AUDIT_TOLERANCE, claimed_rep: Optional[float] = None) -> UpdateOutcome:
    """
    Holder-side handling of one RepUpdate.

    Out-of-range values are dropped; values contradicting the reporter's reputation
    are logged without being aggregated; the rest go through apply_update.

    Args:
        reporter_rep: Reporter reputation as the holder resolved it, never the
            value carried in the message
        claimed_rep: Reputation the reporter attached to its message; a claim
            off by more than the tolerance excludes the report
    """
    if not 0.0 <= value <= 1.0:
        logger.warning(f"⚠ Malformed report {value!r} from {reporter:#x} about {subject:#x}")
        return UpdateOutcome.MALFORMED

    record = store.get(subject)
    if record is None:
        record = seed_record(subject, now)

    forged = claimed_rep is not None and not verify_report(claimed_rep, reporter_rep, tolerance)
    if forged or not verify_report(value, reporter_rep, tolerance):
        store[subject] = record.with_entry(record.reputation, ReporterEntry(reporter, value, now, False, kind))
        logger.debug(f"report {value:.3f} from {reporter:#x} (rep {reporter_rep:.3f}, claimed {claimed_rep}) ignored")
        return UpdateOutcome.EXCLUDED

    store[subject] = apply_update(record, RepReport(subject, value, reporter, now), now, params, kind)
    return UpdateOutcome.INCLUDED


def answer_query(views: Sequence[Optional[RepRecord]], subject: int, now: int,
                 params: DecayParams, expected_count: int = REPLICAS) -> float:
    """
    Resolve a query from the records of the reachable holders.

    Args:
        views: One entry per reachable holder; None when that holder has no record
        subject: Queried peer
        now: Query time

    Returns:
        Median of the holders' decayed values; unknown subjects count as the initial value

    Raises:
        QueryTimeout: no holder reachable
    """
    if not views:
        raise QueryTimeout(f"no holder of {subject:#x} reachable")
    values = [INITIAL_REPUTATION if r is None else current_value(r, now, params) for r in views]
    return resolve_replicas(values, max(expected_count, len(values)))


# ===========================
# Audit
# ===========================
@dataclass(frozen=True)
class AuditResult:
    missing: Set[int]
    mismatched: Set[int]

    def flagged(self) -> Set[int]:
        return self.missing | self.mismatched


def audit_reporters(record: RepRecord, expected_children: Iterable[int], window_start: int,
                    reporter_reputation: Mapping[int, float],
                    tolerance: float = AUDIT_TOLERANCE) -> AuditResult:
    """
    Check that children report on their feeder, and report truthfully.

    Args:
        record: The feeder's own record (its reporter log)
        expected_children: Children that should have reported
        window_start: Earliest log time considered
        reporter_reputation: Median queried reputation of each child
        tolerance: Allowed |reported - queried|

    Returns:
        missing: expected children without a feeder report in the window
        mismatched: reporters whose report strays beyond tolerance
    """
    recent = [e for e in record.last_reporters
              if e.at >= window_start and e.kind is ReportKind.FEEDER]
    reporters = {e.reporter for e in recent}
    missing = {c for c in expected_children if c not in reporters}
    mismatched = {e.reporter for e in recent
                  if e.reporter in reporter_reputation
                  and abs(e.value - reporter_reputation[e.reporter]) > tolerance}
    return AuditResult(missing, mismatched)


# ===========================
# Churn Re-homing
# ===========================
def rehome(subject: int, old_holders: Sequence[int], new_holders: Sequence[int],
           stores: Mapping[int, MutableMapping[int, RepRecord]], now: int, params: DecayParams) -> int:
    """
    Move a subject's record to its recomputed holder set.

    New holders start from the median surviving record, or from the initial
    value when no holder survived. Holders that dropped out forget the record.

    Returns:
        Number of holders that received a copy
    """
    survivors = [stores[h][subject] for h in old_holders if h in stores and subject in stores[h]]
    template = None
    if survivors:
        survivors.sort(key=lambda r: (current_value(r, now, params), r.reputation.updated_at))
        template = survivors[(len(survivors) - 1) // 2]

    copied = 0
    for holder in new_holders:
        store = stores.get(holder)
        if store is None or subject in store:
            continue
        if template is not None:
            store[subject] = template.copy()
        else:
            store[subject] = seed_record(subject, now)
            logger.debug(f"record of {subject:#x} reset, no surviving holder")
        copied += 1

    keep = set(new_holders)
    for holder in old_holders:
        if holder not in keep and holder in stores:
            stores[holder].pop(subject, None)
    return copied


# ===========================
# Layer Registry
# ===========================
@dataclass(frozen=True)
class StreamAssociation:
    source: int
    media: LayerId
    reputation: LayerId
    descriptor: str


class LayerRegistry:
    """StreamId -> (source, media layer, reputation layer, descriptor)."""

    def __init__(self):
        self.associations: Dict[StreamId, StreamAssociation] = {}

    def __contains__(self, stream: StreamId) -> bool:
        return stream in self.associations

    def lookup(self, stream: StreamId) -> StreamAssociation:
        try:
            return self.associations[stream]
        except KeyError:
            raise StreamNotFound(f"stream {stream.key:#x} not registered") from None


def register_stream(registry: LayerRegistry, stream: StreamId, source: int, descriptor: str) -> LayerRegistry:
    """
    Publish a stream with its two DHT layers.

    Raises:
        StreamConflict: stream already registered
    """
    if stream in registry:
        raise StreamConflict(f"stream {stream.key:#x} already registered")
    registry.associations[stream] = StreamAssociation(
        source, media_layer(stream), derive_reputation_layer(stream), descriptor)
    logger.info(f"✓ Registered stream {stream.key:#x} from source {source:#x}")
    return registry
