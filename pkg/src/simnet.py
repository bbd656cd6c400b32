"""
RepStream - Network Simulator
Deterministic discrete-event engine: event queue, latency model, message delivery,
timers, churn and flash-crowd injection, and the bootstrap registry
"""

import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Deque, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
import simpy

from src import config
from src.core_model import KEY_SPACE, Message, StreamId, hash_stream_id
from src.errors import ProtocolViolation, SchedulingViolation, SimulationAbort
from src.metrics import MetricsLog, PeerInfo
from src.peer_node import (
    Action, BehaviorPolicy, Bootstrap, PeerNode, PeerRole, RegisterStream, Send, SetTimer,
)
from src.reputation_dht import (
    LayerRegistry, ReplicaRing, answer_query, register_stream, rehome, seed_record,
)

if TYPE_CHECKING:
    from src.scenario import ScenarioSpec

logger = logging.getLogger(__name__)

DEPARTURE_RULES = {'random', 'interior', 'leaf', 'policy'}


# ===========================
# Events
# ===========================
class EventKind(Enum):
    DELIVER = 'deliver'
    TIMER_FIRE = 'timer_fire'
    PEER_JOIN = 'peer_join'
    PEER_LEAVE = 'peer_leave'
    SAMPLE = 'sample'
    STREAM_END = 'stream_end'
    SCENARIO_END = 'scenario_end'


@dataclass(frozen=True)
class PeerSpec:
    peer_id: int
    policy: BehaviorPolicy
    role: PeerRole = PeerRole.SUBSCRIBER


@dataclass(frozen=True)
class Event:
    at: int
    kind: EventKind
    seq: int = -1
    message: Optional[Message] = None
    peer: Optional[int] = None
    timer: str = ''
    token: int = 0
    spec: Optional[PeerSpec] = None
    departure: Optional['Departure'] = None

    def trace_line(self) -> str:
        if self.kind is EventKind.DELIVER:
            m = self.message
            detail = f"{m.kind.value}|{m.sender:x}>{m.receiver:x}|{m.payload!r}"
        elif self.kind is EventKind.TIMER_FIRE:
            detail = f"{self.peer:x}|{self.timer}|{self.token}"
        elif self.kind is EventKind.PEER_JOIN:
            detail = f"{self.spec.peer_id:x}|{self.spec.policy.label}|{self.spec.role.value}"
        elif self.kind is EventKind.PEER_LEAVE:
            detail = f"{self.departure.rule}"
        else:
            detail = ''
        return f"{self.at}|{self.seq}|{self.kind.value}|{detail}\n"


class EventQueue:
    """
    Simulation clock on a simpy Environment.

    Each scheduled Event becomes a simpy timeout; simpy breaks ties between equal
    times by insertion order, which is the event's seq. pop() steps the environment
    until the next timeout fires, so processes registered with process() run
    interleaved with ordinary events.
    """

    def __init__(self):
        self.env = simpy.Environment()
        self._pending: Dict[int, Event] = {}
        self._fired: Deque[Event] = deque()
        self._next_seq = 0

    @property
    def now(self) -> int:
        return self.env.now

    def __len__(self) -> int:
        return len(self._pending) + len(self._fired)

    def timeout(self, event: Event) -> simpy.Timeout:
        """
        Arm a simpy timeout for an event, assigning the next sequence number.

        Raises:
            SchedulingViolation: event.at precedes the current time
        """
        if event.at < self.now:
            raise SchedulingViolation(f"event at {event.at} scheduled at time {self.now}")
        event = replace(event, seq=self._next_seq)
        self._next_seq += 1
        self._pending[event.seq] = event
        timeout = self.env.timeout(event.at - self.now, value=event)
        timeout.callbacks.append(self._fire)
        return timeout

    def schedule(self, event: Event) -> Event:
        return self.timeout(event).value

    def process(self, generator) -> simpy.Process:
        return self.env.process(generator)

    def _fire(self, timeout: simpy.Timeout):
        event = self._pending.pop(timeout.value.seq)
        self._fired.append(event)

    def pop(self) -> Event:
        """
        Advance the clock to the next event.

        Raises:
            IndexError: nothing left to process
        """
        while not self._fired:
            if self.env.peek() == simpy.core.Infinity:
                raise IndexError("pop from an empty event queue")
            self.env.step()
        return self._fired.popleft()

    def pending(self) -> List[Event]:
        return sorted(self._pending.values(), key=lambda e: (e.at, e.seq))


def schedule(queue: EventQueue, event: Event) -> EventQueue:
    queue.schedule(event)
    return queue


# ===========================
# Latency Model
# ===========================
@dataclass(frozen=True)
class LatencyConfig:
    mode: str = 'uniform'
    lo_ms: int = config.LATENCY_LO_MS
    hi_ms: int = config.LATENCY_HI_MS
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    positions: Optional[Tuple[Tuple[float, float], ...]] = None
    ms_per_unit: float = 1.0
    area: float = 100.0


class LatencyModel:
    """
    One-way latency between two peers; at least 1 ms, symmetric, fixed per seed.

    Matrix and coordinate modes index peers in registration order.
    """

    def __init__(self, settings: LatencyConfig = LatencyConfig(), seed: int = config.DEFAULT_SEED):
        self.settings = settings
        self.seed = seed
        self._index: Dict[int, int] = {}
        self._cache: Dict[Tuple[int, int], int] = {}
        self._positions: List[Tuple[float, float]] = []
        self._rng = np.random.default_rng([seed, 0x1a7])

    def register(self, peer: int):
        if peer in self._index:
            return
        self._index[peer] = len(self._index)
        if self.settings.mode == 'coordinates':
            given = self.settings.positions
            if given is not None:
                self._positions.append(tuple(given[self._index[peer]]))
            else:
                x, y = self._rng.uniform(0.0, self.settings.area, size=2)
                self._positions.append((float(x), float(y)))

    def latency(self, a: int, b: int) -> int:
        key = (a, b) if a <= b else (b, a)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        mode = self.settings.mode
        if mode == 'matrix':
            value = self.settings.matrix[self._index[a]][self._index[b]]
        elif mode == 'coordinates':
            (xa, ya), (xb, yb) = self._positions[self._index[a]], self._positions[self._index[b]]
            value = math.hypot(xa - xb, ya - yb) * self.settings.ms_per_unit
        else:
            rng = np.random.default_rng([self.seed, key[0], key[1]])
            value = rng.integers(self.settings.lo_ms, self.settings.hi_ms + 1)
        value = max(1, int(round(value)))
        self._cache[key] = value
        return value

    def rtt(self, a: int, b: int) -> int:
        return 2 * self.latency(a, b)

    def max_rtt(self) -> int:
        if self.settings.mode == 'uniform':
            return 2 * self.settings.hi_ms
        return 2 * max(self._cache.values(), default=1)


# ===========================
# Churn
# ===========================
@dataclass(frozen=True)
class Arrival:
    at_ms: int
    count: int
    mix: Optional[Dict[str, float]] = None


@dataclass(frozen=True)
class Departure:
    at_ms: int
    rule: str = 'random'
    count: Optional[int] = None
    fraction: Optional[float] = None


@dataclass(frozen=True)
class FlashCrowd:
    at_ms: int
    count: int
    spread_ms: int = 0


@dataclass(frozen=True)
class ChurnSchedule:
    arrivals: Tuple[Arrival, ...] = ()
    departures: Tuple[Departure, ...] = ()
    flash_crowd: Optional[FlashCrowd] = None


def assign_policies(count: int, mix: Dict[str, float], rng: np.random.Generator,
                    malicious_strategy: str = 'always_zero') -> List[BehaviorPolicy]:
    """
    Split `count` peers over the policy mix (largest remainder), then shuffle.
    """
    names = list(mix)
    exact = [mix[n] * count for n in names]
    counts = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(names)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:count - sum(counts)]:
        counts[i] += 1
    labels = []
    for name, n in zip(names, counts):
        text = f"{name}:{malicious_strategy}" if name == 'malicious' else name
        labels.extend([text] * n)
    shuffled = [labels[i] for i in rng.permutation(len(labels))]
    return [BehaviorPolicy.parse(text) for text in shuffled]


# ===========================
# Bootstrap Registry
# ===========================
class BootstrapRegistry:
    """Stream publication plus seeded RT samples for joining peers."""

    def __init__(self, seed: int, sample_size: int = config.RT_CAPACITY):
        self.seed = seed
        self.sample_size = sample_size
        self.layers = LayerRegistry()
        self._requests = 0

    def publish(self, stream: StreamId, source: int, descriptor: str):
        register_stream(self.layers, stream, source, descriptor)

    def bootstrap(self, stream: StreamId, requester: int, live_peers: Sequence[int]) -> Tuple[int, Tuple[int, ...]]:
        """
        Returns:
            (source, RT sample of at most sample_size live peers, never the requester)

        Raises:
            StreamNotFound: stream not published
        """
        association = self.layers.lookup(stream)
        self._requests += 1
        pool = sorted(p for p in live_peers if p != requester)
        if len(pool) > self.sample_size:
            rng = np.random.default_rng([self.seed, self._requests, requester])
            picks = rng.choice(len(pool), size=self.sample_size, replace=False)
            pool = [pool[i] for i in sorted(picks)]
        return association.source, tuple(pool)


# ===========================
# Simulator
# ===========================
class Simulator:
    """
    Runs one scenario to completion.

    Args:
        scenario: Validated ScenarioSpec
    """

    def __init__(self, scenario: 'ScenarioSpec'):
        self.scenario = scenario
        self.settings = scenario.settings()
        self.params = scenario.decay_params()
        self.rng = np.random.default_rng(scenario.seed)
        self.queue = EventQueue()
        self.latency = LatencyModel(scenario.latency, scenario.seed)
        self.registry = BootstrapRegistry(scenario.seed)
        self.ring = ReplicaRing()
        self.nodes: Dict[int, PeerNode] = {}
        self.live: Set[int] = set()
        self.holders: Dict[int, Tuple[int, ...]] = {}
        self.source: Optional[int] = None

        s = scenario.session
        self.stream = hash_stream_id(s['title'], s['speaker'], s['date'], s['time'])
        self.descriptor = f"{s['title']} / {s['speaker']} / {s['date']} {s['time']}"

        self.metrics = MetricsLog(scenario.name, scenario.seed, scenario.duration_ms)
        self._trace = hashlib.sha256()
        self._used_ids: Set[int] = set()

    # ===========================
    # Setup
    # ===========================
    def _new_peer_id(self) -> int:
        while True:
            peer = int(self.rng.integers(0, KEY_SPACE, dtype=np.uint64))
            if peer not in self._used_ids:
                self._used_ids.add(peer)
                return peer

    def _schedule_joins(self, at: int, count: int, spread: int, mix: Dict[str, float]):
        policies = assign_policies(count, mix, self.rng, self.scenario.peers.malicious_strategy)
        offsets = self.rng.integers(0, spread + 1, size=count) if spread > 0 else np.zeros(count, dtype=int)
        for policy, offset in zip(policies, offsets):
            spec = PeerSpec(self._new_peer_id(), policy)
            self.queue.schedule(Event(min(at + int(offset), self.scenario.duration_ms),
                                      EventKind.PEER_JOIN, spec=spec))

    def inject_churn(self, churn) -> EventQueue:
        """Enqueue PeerJoin/PeerLeave events for arrivals, departures and the flash crowd."""
        mix = self.scenario.peers.mix
        for arrival in churn.arrivals:
            self._schedule_joins(arrival.at_ms, arrival.count, 0, arrival.mix or mix)
        if churn.flash_crowd is not None:
            crowd = churn.flash_crowd
            self._schedule_joins(crowd.at_ms, crowd.count, crowd.spread_ms, mix)
        for departure in churn.departures:
            self.queue.schedule(Event(departure.at_ms, EventKind.PEER_LEAVE, departure=departure))
        return self.queue

    def _setup(self):
        scenario = self.scenario
        source_spec = PeerSpec(self._new_peer_id(), BehaviorPolicy(), PeerRole.SOURCE)
        self.queue.schedule(Event(0, EventKind.PEER_JOIN, spec=source_spec))
        self._schedule_joins(0, scenario.peers.count, scenario.join_spread_ms, scenario.peers.mix)
        self.inject_churn(scenario.churn)
        if scenario.stream_end_ms is not None:
            self.queue.schedule(Event(scenario.stream_end_ms, EventKind.STREAM_END))

        period = scenario.sample_period_ms
        times = list(range(period, scenario.duration_ms + 1, period))
        if not times or times[-1] != scenario.duration_ms:
            times.append(scenario.duration_ms)
        self.queue.process(self._sampler(times))

    def _sampler(self, times: Sequence[int]) -> Iterator[simpy.Timeout]:
        """Sampling process; ScenarioEnd follows the last sample."""
        for t in times:
            yield self.queue.timeout(Event(t, EventKind.SAMPLE))
        yield self.queue.timeout(Event(self.scenario.duration_ms, EventKind.SCENARIO_END))

    # ===========================
    # Run loop
    # ===========================
    def run(self) -> MetricsLog:
        """
        Process events until ScenarioEnd.

        Returns:
            The run's MetricsLog

        Raises:
            SimulationAbort: a handler raised; carries the offending event
        """
        logger.info("=" * 60)
        logger.info(f"Running '{self.scenario.name}' (seed {self.scenario.seed}, "
                    f"{self.scenario.duration_ms} ms)")
        self._setup()
        processed = 0
        while self.queue:
            event = self.queue.pop()
            self._trace.update(event.trace_line().encode('utf-8'))
            if event.kind is EventKind.SCENARIO_END:
                break
            try:
                self._dispatch(event)
                self.check_topology(self._actor(event))
            except SimulationAbort:
                raise
            except Exception as e:
                logger.error(f"✗ Handler failed at t={event.at}: {e}")
                raise SimulationAbort(event, e) from e
            processed += 1

        self._finish()
        logger.info(f"✓ Processed {processed} events, trace {self.metrics.trace_hash[:16]}")
        logger.info("=" * 60)
        return self.metrics

    def _dispatch(self, event: Event):
        now = event.at
        kind = event.kind
        if kind is EventKind.DELIVER:
            node = self.nodes.get(event.message.receiver)
            if node is None or node.departed:
                self.metrics.counters['dropped_departed'] += 1
                return
            self.metrics.counters['delivered'] += 1
            self._apply(node, node.handle_message(event.message, now), now)
        elif kind is EventKind.TIMER_FIRE:
            node = self.nodes[event.peer]
            if not node.departed:
                self._apply(node, node.on_timer(event.timer, event.token, now), now)
        elif kind is EventKind.PEER_JOIN:
            self._join(event.spec, now)
        elif kind is EventKind.PEER_LEAVE:
            self._depart(event.departure, now)
        elif kind is EventKind.SAMPLE:
            self._sample(now)
        elif kind is EventKind.STREAM_END:
            source = self.nodes[self.source]
            self._apply(source, source.handle_stream_end(now), now)

    def _actor(self, event: Event) -> Optional[int]:
        if event.kind is EventKind.DELIVER:
            return event.message.receiver
        if event.kind is EventKind.TIMER_FIRE:
            return event.peer
        if event.kind is EventKind.PEER_JOIN:
            return event.spec.peer_id
        if event.kind is EventKind.STREAM_END:
            return self.source
        return None

    def check_topology(self, peer: Optional[int]):
        """
        Fan-out and parent-chain check for the peer an event touched.

        Only the handling peer changes its parent or its children, so checking it
        after every event keeps the whole overlay a forest within the fan-out.

        Raises:
            ProtocolViolation: too many children, or a parent chain loops
        """
        node = self.nodes.get(peer) if peer is not None else None
        if node is None or node.departed:
            return
        children = len(node.tables.omt.children)
        if children > self.settings.fanout:
            raise ProtocolViolation(f"{peer:#x} holds {children} children, fan-out is {self.settings.fanout}")
        seen = {peer}
        current = node.parent
        while current is not None and current in self.live:
            if current in seen:
                raise ProtocolViolation(f"parent cycle through {current:#x}")
            seen.add(current)
            current = self.nodes[current].parent

    def _apply(self, node: PeerNode, actions: List[Action], now: int):
        for action in actions:
            if isinstance(action, Send):
                self._send(action.message, now)
            elif isinstance(action, SetTimer):
                self.queue.schedule(Event(now + action.delay, EventKind.TIMER_FIRE, peer=node.id,
                                          timer=action.name, token=action.token))
            elif isinstance(action, Bootstrap):
                source, sample = self.registry.bootstrap(action.stream, node.id, sorted(self.live))
                self._apply(node, node.on_bootstrap(source, sample, now), now)
            elif isinstance(action, RegisterStream):
                self.registry.publish(action.stream, node.id, action.descriptor)

    def _send(self, message: Message, now: int):
        counters = self.metrics.counters
        counters['sent'] += 1
        self.metrics.message_counters[message.kind.value] += 1
        p = self.scenario.drop_probability
        if p > 0 and self.rng.random() < p:
            counters['dropped_random'] += 1
            return
        delay = self.latency.latency(message.sender, message.receiver)
        self.queue.schedule(Event(now + delay, EventKind.DELIVER, message=message))

    # ===========================
    # Membership
    # ===========================
    def _locate(self, subject: int) -> Tuple[int, ...]:
        return self.ring.locate(subject).holders

    def _stores(self):
        return {peer: self.nodes[peer].records for peer in self.live}

    def _rehome_all(self, now: int):
        stores = self._stores()
        for subject in sorted(self.holders):
            new = self._locate(subject)
            old = self.holders[subject]
            if new != old:
                rehome(subject, old, new, stores, now, self.params)
                self.holders[subject] = new

    def _join(self, spec: PeerSpec, now: int):
        peer = spec.peer_id
        node = PeerNode(peer, spec.role, self.stream, spec.policy,
                        locate=self._locate,
                        probe_rtt=lambda other, me=peer: self.latency.rtt(me, other),
                        settings=self.settings, params=self.params,
                        observer=self.metrics.record_event)
        self.nodes[peer] = node
        self.live.add(peer)
        self.latency.register(peer)
        self.ring.add(peer)
        self._rehome_all(now)

        pinned = spec.role is PeerRole.SOURCE
        holders = self._locate(peer)
        for holder in holders:
            self.nodes[holder].records[peer] = seed_record(peer, now, pinned=pinned)
        self.holders[peer] = holders
        self.metrics.peers[peer] = PeerInfo(spec.policy.label, spec.role.value, now)

        if pinned:
            self.source = peer
            self.metrics.source = peer
            self._apply(node, node.source_start(self.descriptor, now), now)
        else:
            self._apply(node, node.start(now), now)

    def select_departures(self, departure: Departure) -> List[int]:
        """Pick the peers a departure removes, never the source."""
        rule, _, arg = departure.rule.partition(':')
        subscribers = sorted(p for p in self.live if p != self.source)
        if rule == 'interior':
            eligible = [p for p in subscribers if self.nodes[p].tables.omt.children]
        elif rule == 'leaf':
            eligible = [p for p in subscribers if not self.nodes[p].tables.omt.children]
        elif rule == 'policy':
            eligible = [p for p in subscribers if self.nodes[p].policy.label == arg]
        else:
            eligible = subscribers
        if departure.count is not None:
            wanted = min(departure.count, len(eligible))
        else:
            wanted = min(len(eligible), max(1, int(round(departure.fraction * len(eligible)))))

        chosen: List[int] = []
        for index in self.rng.permutation(len(eligible)):
            if len(chosen) >= wanted:
                break
            peer = eligible[int(index)]
            if rule == 'interior':
                # never a peer together with its own parent or child
                parent = self.nodes[peer].parent
                if parent in chosen or any(self.nodes[c].parent == peer for c in chosen):
                    continue
            chosen.append(peer)
        return chosen

    def _depart(self, departure: Departure, now: int):
        chosen = self.select_departures(departure)
        for peer in chosen:
            node = self.nodes[peer]
            for child in node.tables.omt.child_ids():
                if child in self.live:
                    self.metrics.orphans[child] = now
            node.depart()
            self.live.discard(peer)
            self.ring.remove(peer)
            self.holders.pop(peer, None)
            self.metrics.peers[peer].departed_at = now
            self.metrics.departures.append((now, peer, departure.rule))
        for peer in chosen:
            self.metrics.orphans.pop(peer, None)
        if chosen:
            self._rehome_all(now)
            logger.info(f"⚠ {len(chosen)} peers left at t={now} ({departure.rule})")

    # ===========================
    # Sampling
    # ===========================
    def reputation_of(self, subject: int, now: int) -> float:
        """Reputation as the holders currently store it (global view, no messages)."""
        views = [self.nodes[h].records.get(subject) for h in self._locate(subject)]
        return answer_query(views, subject, now, self.params)

    def _sample(self, now: int):
        live = sorted(self.live)
        reputations = {p: self.reputation_of(p, now) for p in live if p != self.source}
        parents = {p: self.nodes[p].parent for p in live}
        children = {p: len(self.nodes[p].tables.omt.children) for p in live}
        self.metrics.record_sample(now, reputations, parents, children)
        if children and max(children.values()) > self.settings.fanout:
            raise ProtocolViolation(f"fan-out exceeded at t={now}")

    def _finish(self):
        m = self.metrics
        now = self.queue.now
        m.counters['in_flight'] = sum(1 for e in self.queue.pending() if e.kind is EventKind.DELIVER)
        for peer in sorted(self.live):
            node = self.nodes[peer]
            m.final_parents[peer] = node.parent
            m.final_children[peer] = len(node.tables.omt.children)
            if peer != self.source:
                m.final_reputation[peer] = self.reputation_of(peer, now)
            buf = node.playout
            m.chunk_stats[peer] = {
                'chunks_received': buf.received,
                'chunks_duplicate': buf.duplicates,
                'chunks_late': buf.late,
                'max_gap': buf.max_gap,
                'mean_delay_ms': round(buf.mean_delay_ms, 3),
            }
        m.trace_hash = self._trace.hexdigest()


def run(scenario: 'ScenarioSpec') -> MetricsLog:
    """Run one scenario and return its metrics log."""
    return Simulator(scenario).run()
