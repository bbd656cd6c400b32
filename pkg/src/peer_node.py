"""
RepStream - Peer Node
Per-peer protocol state machine for the source and for subscribers/forwarders.

Handlers take one inbound event and return the ordered list of outbound actions;
the simulator turns those into message deliveries and timer fires.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple, Union

from src import config
from src.core_model import (
    Message, MessageKind, Reputation, StreamId, ReportKind, circular_distance,
    BeaconPayload, JoinRequestPayload, JoinAcceptPayload, JoinRejectPayload, EvictPayload,
    StreamChunkPayload, RepUpdatePayload, RepQueryPayload, RepReplyPayload,
    StreamEndPayload, LeavePayload, TableExchangePayload,
)
from src.errors import ProtocolViolation
from src.peer_tables import (
    PeerTables, AdmitOutcome, rt_merge, nt_update, brt_record_beacon, omt_admit,
    omt_keepalive_sweep, bpt_record,
)
from src.reputation_dht import (
    RepRecord, UpdateOutcome, audit_reporters, current_value, receive_update,
)
from src.reputation_engine import DecayParams, resolve_replicas

logger = logging.getLogger(__name__)


# ===========================
# Roles and Policies
# ===========================
class PeerRole(Enum):
    SOURCE = 'source'
    SUBSCRIBER = 'subscriber'


class BehaviorKind(Enum):
    ALTRUISTIC = 'altruistic'
    FREE_RIDER = 'free_rider'
    MALICIOUS = 'malicious'


class ReportStrategy(Enum):
    ALWAYS_ZERO = 'always_zero'
    ALWAYS_ONE = 'always_one'
    INVERT = 'invert'

    def falsify(self, value: float) -> float:
        if self is ReportStrategy.ALWAYS_ZERO:
            return 0.0
        if self is ReportStrategy.ALWAYS_ONE:
            return 1.0
        return 1.0 - value


@dataclass(frozen=True)
class BehaviorPolicy:
    kind: BehaviorKind = BehaviorKind.ALTRUISTIC
    strategy: Optional[ReportStrategy] = None

    def __post_init__(self):
        if (self.kind is BehaviorKind.MALICIOUS) != (self.strategy is not None):
            raise ValueError("a report strategy goes with the malicious policy only")

    @classmethod
    def parse(cls, text: str) -> 'BehaviorPolicy':
        """'altruistic', 'free_rider', 'malicious' or 'malicious:<strategy>'."""
        name, _, strategy = text.partition(':')
        kind = BehaviorKind(name)
        if kind is BehaviorKind.MALICIOUS:
            return cls(kind, ReportStrategy(strategy or ReportStrategy.ALWAYS_ZERO.value))
        if strategy:
            raise ValueError(f"policy {name} takes no strategy")
        return cls(kind)

    @property
    def label(self) -> str:
        return self.kind.value

    @property
    def forwards(self) -> bool:
        return self.kind is not BehaviorKind.FREE_RIDER

    @property
    def reports(self) -> bool:
        return self.kind is not BehaviorKind.FREE_RIDER

    def feeder_report(self, own_reputation: float) -> float:
        if self.strategy is not None:
            return self.strategy.falsify(own_reputation)
        return own_reputation


ALTRUISTIC = BehaviorPolicy()


# ===========================
# Settings
# ===========================
@dataclass(frozen=True)
class ProtocolSettings:
    """Protocol knobs; defaults come from src.config, scenarios override them."""
    fanout: int = config.FANOUT
    beacon_period_ms: int = config.BEACON_PERIOD_MS
    chunk_period_ms: int = config.CHUNK_PERIOD_MS
    join_timeout_ms: int = config.JOIN_TIMEOUT_MS
    keepalive_period_ms: int = config.KEEPALIVE_PERIOD_MS
    keepalive_timeout_ms: int = config.KEEPALIVE_TIMEOUT_MS
    parent_timeout_ms: int = config.PARENT_TIMEOUT_MS
    climb_period_ms: int = config.CLIMB_PERIOD_MS
    exchange_period_ms: int = config.TABLE_EXCHANGE_PERIOD_MS
    exchange_rt_entries: int = config.EXCHANGE_RT_ENTRIES
    audit_period_ms: int = config.AUDIT_PERIOD_MS
    query_timeout_ms: int = config.QUERY_TIMEOUT_MS
    report_every_chunks: int = config.REPORT_EVERY_CHUNKS
    max_join_attempts: int = config.MAX_JOIN_ATTEMPTS
    climb_margin: float = config.CLIMB_MARGIN
    brt_window_beacons: int = config.BRT_WINDOW_BEACONS
    audit_tolerance: float = config.AUDIT_TOLERANCE
    audit_penalty: float = config.AUDIT_PENALTY
    malicious_holders: bool = False

    @property
    def report_period_ms(self) -> int:
        return self.report_every_chunks * self.chunk_period_ms

    @property
    def audit_window_ms(self) -> int:
        return 3 * self.report_period_ms

    @property
    def advertise_window_ms(self) -> float:
        return 1.5 * self.keepalive_period_ms


# ===========================
# Outbound Actions
# ===========================
@dataclass(frozen=True)
class Send:
    message: Message


@dataclass(frozen=True)
class SetTimer:
    name: str
    delay: int
    token: int = 0


@dataclass(frozen=True)
class Bootstrap:
    """Ask the bootstrap registry for the stream source and an RT sample."""
    stream: StreamId


@dataclass(frozen=True)
class RegisterStream:
    stream: StreamId
    descriptor: str


Action = Union[Send, SetTimer, Bootstrap, RegisterStream]


# ===========================
# Per-peer State
# ===========================
@dataclass(frozen=True)
class PendingJoin:
    target: int
    sent_at: int
    attempts: int = 1
    climb: bool = False


@dataclass
class PendingQuery:
    subject: int
    holders: Tuple[int, ...]
    want_log: bool
    purposes: List[tuple] = field(default_factory=list)
    values: Dict[int, float] = field(default_factory=dict)
    log: Tuple = ()


@dataclass
class PlayoutBuffer:
    """Received chunks in strictly increasing sequence order, with delivery statistics."""
    head: int = -1
    queue: Deque[int] = field(default_factory=lambda: deque(maxlen=256))
    received: int = 0
    duplicates: int = 0
    late: int = 0
    max_gap: int = 0
    delay_total: int = 0

    def offer(self, seq: int, origin_ts: int, now: int) -> bool:
        if seq <= self.head:
            if seq in self.queue:
                self.duplicates += 1
            else:
                self.late += 1
            return False
        if self.head >= 0:
            self.max_gap = max(self.max_gap, seq - self.head - 1)
        self.head = seq
        self.queue.append(seq)
        self.received += 1
        self.delay_total += now - origin_ts
        return True

    @property
    def mean_delay_ms(self) -> float:
        return self.delay_total / self.received if self.received else 0.0


def _noop_observer(kind: str, /, **fields):
    pass


class PeerNode:
    """
    One peer of one stream.

    Args:
        peer_id: Ring position of the peer
        role: Source or subscriber
        stream: Stream the peer takes part in
        policy: Behaviour (altruistic, free rider, malicious)
        locate: subject -> replica holders of the subject's record
        probe_rtt: peer -> measured round-trip time in ms
        settings: Protocol knobs
        params: Reputation decay parameters
        observer: Callback receiving protocol milestones for the metrics stream
    """

    def __init__(self, peer_id: int, role: PeerRole, stream: StreamId,
                 policy: BehaviorPolicy = ALTRUISTIC,
                 locate: Callable[[int], Tuple[int, ...]] = lambda subject: (),
                 probe_rtt: Callable[[int], int] = lambda peer: 0,
                 settings: ProtocolSettings = ProtocolSettings(),
                 params: DecayParams = DecayParams(),
                 observer: Callable = _noop_observer):
        self.id = peer_id
        self.role = role
        self.stream = stream
        self.policy = policy
        self.settings = settings
        self.params = params
        self.locate = locate
        self.probe_rtt = probe_rtt
        self.observe = observer

        self.tables = PeerTables(peer_id, settings.fanout)
        self.records: Dict[int, RepRecord] = {}
        self.playout = PlayoutBuffer()

        self.started = False
        self.departed = False
        self.source: Optional[int] = peer_id if role is PeerRole.SOURCE else None
        self.ancestry: Tuple[int, ...] = ()
        self.last_parent_contact = 0
        self.lost_parent: Optional[int] = None

        self.pending_join: Optional[PendingJoin] = None
        self.join_token = 0
        self.candidates: Deque[int] = deque()
        self.tried: Set[int] = set()

        self.beacon_seq = 0
        self.chunk_seq = 0
        self.forwarded_beacon = -1
        self.chunks_since_report = 0
        self.exchange_round = 0

        self.next_query_id = 0
        self.queries: Dict[int, PendingQuery] = {}
        self._open_queries: Dict[Tuple[int, bool], int] = {}
        self.rep_cache: Dict[int, Tuple[float, int]] = {}
        self._climb_values: Dict[int, float] = {}

    # ===========================
    # Helpers
    # ===========================
    @property
    def parent(self) -> Optional[int]:
        return self.tables.omt.parent

    @property
    def attached(self) -> bool:
        return self.role is PeerRole.SOURCE or self.parent is not None

    def _send(self, kind: MessageKind, to: int, payload) -> Send:
        return Send(Message(kind, self.id, to, self.stream, payload))

    def _advertised_children(self, now: int, exclude: Optional[int] = None) -> Tuple[int, ...]:
        horizon = now - self.settings.advertise_window_ms
        return tuple(c for c, entry in self.tables.omt.children.items()
                     if entry.last_keepalive >= horizon and c != exclude)

    def _set_detached(self, now: int, reason: str):
        self.tables.omt.set_parent(None)
        self.ancestry = ()
        self.chunks_since_report = 0
        self.observe('detached', peer=self.id, at=now, reason=reason)

    # ===========================
    # Lifecycle
    # ===========================
    def source_start(self, descriptor: str, now: int) -> List[Action]:
        """
        Publish the stream and start the beacon, chunk, audit and sweep timers.

        Raises:
            ProtocolViolation: not the source, or already started
        """
        if self.role is not PeerRole.SOURCE:
            raise ProtocolViolation(f"{self.id:#x} is not a source")
        if self.started:
            raise ProtocolViolation(f"source {self.id:#x} already started")
        self.started = True
        logger.info(f"✓ Source {self.id:#x} streaming")
        return [
            RegisterStream(self.stream, descriptor),
            SetTimer('beacon', self.settings.beacon_period_ms),
            SetTimer('chunk', self.settings.chunk_period_ms),
            SetTimer('audit', self.settings.audit_period_ms),
            SetTimer('keepalive', self.settings.keepalive_period_ms),
            SetTimer('exchange', self.settings.exchange_period_ms),
        ]

    def start(self, now: int) -> List[Action]:
        """Subscriber entry: fetch the source and an RT sample from the bootstrap registry."""
        if self.role is PeerRole.SOURCE:
            raise ProtocolViolation("the source starts through source_start")
        if self.started:
            raise ProtocolViolation(f"peer {self.id:#x} already started")
        self.started = True
        return [
            Bootstrap(self.stream),
            SetTimer('keepalive', self.settings.keepalive_period_ms),
            SetTimer('climb', self.settings.climb_period_ms),
            SetTimer('audit', self.settings.audit_period_ms),
            SetTimer('exchange', self.settings.exchange_period_ms),
        ]

    def on_bootstrap(self, source: int, rt_sample: Tuple[int, ...], now: int) -> List[Action]:
        """Registry answer: learn the overlay, then ask the source directly."""
        if self.departed:
            return []
        self.source = source
        rt_merge(self.tables.rt, rt_sample)
        for peer in rt_sample:
            if peer != self.id:
                nt_update(self.tables.nt, peer, self.probe_rtt(peer))
        self.tried.clear()
        if self.attached or (self.pending_join is not None):
            return []
        return self._send_join(source, now)

    def depart(self):
        """Silent crash: no goodbye, every later event is ignored."""
        self.departed = True

    # ===========================
    # Dispatch
    # ===========================
    def handle_message(self, message: Message, now: int) -> List[Action]:
        if self.departed:
            return []
        if message.sender == self.parent and message.sender is not None:
            self.last_parent_contact = now

        kind = message.kind
        payload = message.payload
        if kind is MessageKind.BEACON:
            return self.handle_beacon(message.sender, payload, now)
        if kind is MessageKind.JOIN_REQUEST:
            return self.handle_join_request(message.sender, now, payload)
        if kind in (MessageKind.JOIN_ACCEPT, MessageKind.JOIN_REJECT, MessageKind.EVICT):
            return self.handle_join_response(message, now)
        if kind is MessageKind.STREAM_CHUNK:
            return self.handle_stream_chunk(message.sender, payload, now)
        if kind is MessageKind.REP_UPDATE:
            return self._on_rep_update(message.sender, payload, now)
        if kind is MessageKind.REP_QUERY:
            return self._on_rep_query(message.sender, payload, now)
        if kind is MessageKind.REP_REPLY:
            return self._on_rep_reply(message.sender, payload, now)
        if kind is MessageKind.STREAM_END:
            return self.handle_stream_end(now)
        if kind is MessageKind.LEAVE:
            return self._on_leave(message.sender, now)
        if kind is MessageKind.TABLE_EXCHANGE:
            return self.handle_table_exchange(message.sender, payload, now)
        return []

    def on_timer(self, name: str, token: int, now: int) -> List[Action]:
        if self.departed:
            return []
        if name == 'beacon':
            return self._beacon_tick(now)
        if name == 'chunk':
            return self._chunk_tick(now)
        if name == 'keepalive':
            return self._keepalive_tick(now)
        if name == 'climb':
            return self.grandparent_climb_tick(now)
        if name == 'audit':
            return self._audit_tick(now)
        if name == 'exchange':
            return self._exchange_tick(now)
        if name == 'join':
            if token != self.join_token:
                return []
            return self.join_timeout_tick(now)
        if name == 'query':
            return self._query_timeout(token, now)
        logger.warning(f"⚠ Unknown timer {name!r} at {self.id:#x}")
        return []

    # ===========================
    # Source Timers
    # ===========================
    def _beacon_tick(self, now: int) -> List[Action]:
        self.beacon_seq += 1
        payload = BeaconPayload(self.beacon_seq, (self.id,))
        targets = set(self.tables.rt.entries) | set(self.tables.nt.peers())
        actions: List[Action] = [self._send(MessageKind.BEACON, peer, payload)
                                 for peer in sorted(targets) if peer != self.id]
        logger.debug(f"{self.id:#x} beacon {self.beacon_seq} to {len(actions)} peers")
        self.observe('beacon', peer=self.id, seq=self.beacon_seq, recipients=len(actions), at=now)
        actions.append(SetTimer('beacon', self.settings.beacon_period_ms))
        return actions

    def _chunk_tick(self, now: int) -> List[Action]:
        self.chunk_seq += 1
        payload = StreamChunkPayload(self.chunk_seq, now)
        actions: List[Action] = [self._send(MessageKind.STREAM_CHUNK, child, payload)
                                 for child in self.tables.omt.child_ids()]
        actions.append(SetTimer('chunk', self.settings.chunk_period_ms))
        return actions

    # ===========================
    # Beacons
    # ===========================
    def handle_beacon(self, sender: int, payload: BeaconPayload, now: int) -> List[Action]:
        """
        Rank the sender in the BRT, forward the first copy of each beacon to the
        children and start a join when neither attached nor joining.
        """
        if self.role is PeerRole.SOURCE:
            return []
        window = self.settings.brt_window_beacons * self.settings.beacon_period_ms
        brt_record_beacon(self.tables.brt, sender, now, window)

        actions: List[Action] = []
        from_parent = sender == self.parent
        if from_parent:
            if self.id in payload.path:
                logger.debug(f"{self.id:#x} found itself in its parent's path, leaving")
                return self._abandon_parent(now, 'loop')
            self.ancestry = payload.path

        if (from_parent or self.parent is None) and payload.seq > self.forwarded_beacon:
            self.forwarded_beacon = payload.seq
            forward = BeaconPayload(payload.seq, self.ancestry + (self.id,))
            actions.extend(self._send(MessageKind.BEACON, child, forward)
                           for child in self.tables.omt.child_ids())

        if self.parent is None and self.pending_join is None:
            for peer in self.tables.brt.peers():
                if self._joinable(peer):
                    actions.extend(self._send_join(peer, now))
                    break
        return actions

    # ===========================
    # Table maintenance
    # ===========================
    def _exchange_entries(self, partner: int) -> Tuple[int, ...]:
        rt = sorted(self.tables.rt.entries, key=lambda p: (circular_distance(partner, p), p))
        offered = dict.fromkeys(self.tables.nt.peers() + rt[:self.settings.exchange_rt_entries])
        offered.pop(partner, None)
        return tuple(offered)

    def _exchange_tick(self, now: int) -> List[Action]:
        """Offer the NT and the RT entries nearest the partner to one neighbour, round robin."""
        partners = self.tables.nt.peers() or self.tables.rt.entries
        actions: List[Action] = []
        if partners:
            partner = partners[self.exchange_round % len(partners)]
            self.exchange_round += 1
            actions.append(self._send(MessageKind.TABLE_EXCHANGE, partner,
                                      TableExchangePayload(self._exchange_entries(partner))))
        actions.append(SetTimer('exchange', self.settings.exchange_period_ms))
        return actions

    def handle_table_exchange(self, sender: int, payload: TableExchangePayload, now: int) -> List[Action]:
        """Merge offered entries into the RT and re-rank the NT by measured RTT."""
        offered = [p for p in payload.entries if p != self.id]
        rt_merge(self.tables.rt, [sender] + offered)
        for peer in [sender] + offered:
            nt_update(self.tables.nt, peer, self.probe_rtt(peer))
        self.observe('table_exchange', peer=self.id, partner=sender, offered=len(offered), at=now)
        if payload.reply:
            return []
        return [self._send(MessageKind.TABLE_EXCHANGE, sender,
                           TableExchangePayload(self._exchange_entries(sender), reply=True))]

    # ===========================
    # Join: acceptor side
    # ===========================
    def handle_join_request(self, sender: int, now: int,
                            payload: JoinRequestPayload = JoinRequestPayload()) -> List[Action]:
        """
        Keepalive from an existing child, or an admission request checked
        against the requester's reputation.
        """
        omt = self.tables.omt
        child = omt.children.get(sender)
        if child is not None:
            child.last_keepalive = now
            return []

        if self.role is PeerRole.SOURCE:
            rt_merge(self.tables.rt, [sender])

        if not self._can_admit(sender):
            return [self._send(MessageKind.JOIN_REJECT, sender, JoinRejectPayload())]

        hint = payload.lost_parent
        if hint is not None and hint in omt.children:
            if omt.children[hint].last_keepalive < now - self.settings.keepalive_period_ms:
                omt.remove_child(hint)
                logger.debug(f"{self.id:#x} drops {hint:#x} on a lost-parent hint")

        return self._query(sender, now, ('admit', sender))

    def _can_admit(self, requester: int) -> bool:
        return (self.attached and self.policy.forwards and not self.departed
                and requester != self.parent and requester not in self.ancestry)

    def _admit(self, requester: int, reputation: float, now: int) -> List[Action]:
        omt = self.tables.omt
        if requester in omt.children:
            return []
        if not self._can_admit(requester):
            return [self._send(MessageKind.JOIN_REJECT, requester, JoinRejectPayload())]

        decision = omt_admit(omt, requester, reputation, now)
        path = self.ancestry + (self.id,)
        if decision.outcome is AdmitOutcome.ACCEPT:
            logger.debug(f"{self.id:#x} accepts {requester:#x} (rep {reputation:.3f})")
            return [self._send(MessageKind.JOIN_ACCEPT, requester, JoinAcceptPayload(self.parent, path))]

        if decision.outcome is AdmitOutcome.REPLACE:
            siblings = tuple(c for c in self._advertised_children(now) if c != decision.evicted)
            self.observe('evict', peer=decision.evicted, by=self.id, at=now)
            return [
                self._send(MessageKind.JOIN_ACCEPT, requester, JoinAcceptPayload(self.parent, path)),
                self._send(MessageKind.EVICT, decision.evicted, EvictPayload(siblings)),
            ]

        return [self._send(MessageKind.JOIN_REJECT, requester,
                           JoinRejectPayload(self._advertised_children(now)))]

    # ===========================
    # Join: joiner side
    # ===========================
    def _joinable(self, peer: int) -> bool:
        return (peer != self.id and peer != self.parent and peer not in self.tried
                and peer not in self.tables.omt.children)

    def _send_join(self, target: int, now: int, attempts: int = 1, climb: bool = False) -> List[Action]:
        self.pending_join = PendingJoin(target, now, attempts, climb)
        self.tried.add(target)
        self.join_token += 1
        hint = None if climb else self.lost_parent
        return [
            self._send(MessageKind.JOIN_REQUEST, target, JoinRequestPayload(hint)),
            SetTimer('join', self.settings.join_timeout_ms, self.join_token),
        ]

    def _next_candidate(self) -> Optional[int]:
        while self.candidates:
            peer = self.candidates.popleft()
            if self._joinable(peer):
                return peer
        bpt = self.tables.bpt
        for peer in self.tables.brt.peers() + bpt.grandparents + bpt.siblings:
            if self._joinable(peer):
                return peer
        return None

    def _advance_join(self, now: int) -> List[Action]:
        self.pending_join = None
        target = self._next_candidate()
        if target is not None:
            return self._send_join(target, now)
        # candidates exhausted: refresh from the registry and retry the source
        logger.debug(f"{self.id:#x} re-bootstraps")
        self.tried.clear()
        self.join_token += 1
        return [Bootstrap(self.stream)]

    def handle_join_response(self, message: Message, now: int) -> List[Action]:
        """Apply a JoinAccept, JoinReject or Evict."""
        sender = message.sender
        payload = message.payload
        pending = self.pending_join

        if message.kind is MessageKind.EVICT:
            if sender != self.parent:
                return []
            self._set_detached(now, 'evicted')
            bpt_record(self.tables.bpt, None, payload.siblings)
            self.candidates = deque(s for s in payload.siblings if s != self.id)
            self.tried = {sender}
            return self._advance_join(now)

        if pending is None or pending.target != sender:
            if message.kind is MessageKind.JOIN_ACCEPT and sender != self.parent:
                # stale acceptance: free the slot it reserved
                return [self._send(MessageKind.LEAVE, sender, LeavePayload())]
            return []

        if message.kind is MessageKind.JOIN_REJECT:
            if pending.climb:
                self.pending_join = None
                return []
            bpt_record(self.tables.bpt, None, payload.children)
            fresh = [c for c in payload.children if c != self.id]
            self.candidates.extendleft(reversed(fresh))
            return self._advance_join(now)

        # JoinAccept
        if self.id in payload.path or sender in self.tables.omt.children:
            logger.debug(f"{self.id:#x} refuses acceptance from {sender:#x} (would loop)")
            actions: List[Action] = [self._send(MessageKind.LEAVE, sender, LeavePayload())]
            if pending.climb:
                self.pending_join = None
                return actions
            return actions + self._advance_join(now)

        actions = []
        old_parent = self.parent
        self.tables.omt.set_parent(sender)
        if old_parent is not None and old_parent != sender:
            actions.append(self._send(MessageKind.LEAVE, old_parent, LeavePayload()))
        self.ancestry = payload.path
        self.last_parent_contact = now
        bpt_record(self.tables.bpt, payload.grandparent, ())
        self.pending_join = None
        self.join_token += 1
        self.candidates.clear()
        self.tried.clear()
        self.lost_parent = None
        self.chunks_since_report = 0
        self.observe('attached', peer=self.id, parent=sender, at=now, climb=pending.climb)
        return actions

    def join_timeout_tick(self, now: int) -> List[Action]:
        """Resend once, then fall back to the next candidate."""
        pending = self.pending_join
        if pending is None:
            return []
        if pending.attempts < self.settings.max_join_attempts:
            return self._send_join(pending.target, now, pending.attempts + 1, pending.climb)
        if pending.climb:
            self.pending_join = None
            return []
        return self._advance_join(now)

    # ===========================
    # Liveness
    # ===========================
    def _abandon_parent(self, now: int, reason: str) -> List[Action]:
        lost = self.parent
        actions: List[Action] = []
        if lost is not None:
            actions.append(self._send(MessageKind.LEAVE, lost, LeavePayload()))
            self.tables.forget(lost)
            self.lost_parent = lost
        self._set_detached(now, reason)
        if reason == 'parent_lost':
            self.observe('parent_lost', peer=self.id, parent=lost, at=now)
        self.candidates.clear()
        self.tried = {lost} if lost is not None else set()
        if self.pending_join is not None and not self.pending_join.climb:
            return actions
        return actions + self._advance_join(now)

    def _keepalive_tick(self, now: int) -> List[Action]:
        actions: List[Action] = [SetTimer('keepalive', self.settings.keepalive_period_ms)]
        _, removed = omt_keepalive_sweep(self.tables.omt, now, self.settings.keepalive_timeout_ms)
        for child in removed:
            logger.debug(f"{self.id:#x} swept silent child {child:#x}")
        if self.role is PeerRole.SOURCE:
            return actions

        if self.parent is not None:
            if now - self.last_parent_contact > self.settings.parent_timeout_ms:
                logger.debug(f"{self.id:#x} lost parent {self.parent:#x}")
                return actions + self._abandon_parent(now, 'parent_lost')
            actions.append(self._send(MessageKind.JOIN_REQUEST, self.parent, JoinRequestPayload()))
        elif self.pending_join is None and self.source is not None:
            actions.extend(self._advance_join(now))
        return actions

    def _on_leave(self, sender: int, now: int) -> List[Action]:
        if self.tables.omt.remove_child(sender):
            return []
        if sender == self.parent:
            return self._abandon_parent(now, 'parent_left')
        return []

    # ===========================
    # Media
    # ===========================
    def handle_stream_chunk(self, sender: int, payload: StreamChunkPayload, now: int) -> List[Action]:
        """Play out, forward to children, and report on the feeder every reporting period."""
        if sender != self.parent:
            return []
        if not self.playout.offer(payload.seq, payload.origin_ts, now):
            return []

        actions: List[Action] = []
        if self.policy.forwards:
            actions.extend(self._send(MessageKind.STREAM_CHUNK, child, payload)
                           for child in self.tables.omt.child_ids())

        if self.policy.reports:
            self.chunks_since_report += 1
            if self.chunks_since_report >= self.settings.report_every_chunks:
                self.chunks_since_report = 0
                actions.extend(self._query(self.id, now, ('report', sender)))
        return actions

    def handle_stream_end(self, now: int) -> List[Action]:
        """Flood the end of the stream and stop."""
        if self.departed:
            return []
        targets = set(self.tables.omt.child_ids())
        if self.role is PeerRole.SOURCE:
            targets |= set(self.tables.rt.entries) | set(self.tables.nt.peers())
        self.departed = True
        return [self._send(MessageKind.STREAM_END, peer, StreamEndPayload())
                for peer in sorted(targets) if peer != self.id]

    # ===========================
    # Grandparent Climb
    # ===========================
    def grandparent_climb_tick(self, now: int) -> List[Action]:
        actions: List[Action] = [SetTimer('climb', self.settings.climb_period_ms)]
        parent = self.parent
        grandparents = self.tables.bpt.grandparents
        if parent is None or not grandparents or self.pending_join is not None:
            return actions
        grandparent = grandparents[0]
        if grandparent in (parent, self.id) or grandparent in self.tables.omt.children:
            return actions
        self._climb_values = {}
        actions.extend(self._query(grandparent, now, ('climb', grandparent, parent)))
        actions.extend(self._query(parent, now, ('climb', grandparent, parent)))
        return actions

    def _climb_decide(self, grandparent: int, parent: int, now: int) -> List[Action]:
        values = self._climb_values
        if grandparent not in values or parent not in values:
            return []
        self._climb_values = {}
        if self.parent != parent or self.pending_join is not None:
            return []
        if values[grandparent] > values[parent] + self.settings.climb_margin:
            logger.debug(f"{self.id:#x} climbs towards {grandparent:#x}")
            return self._send_join(grandparent, now, climb=True)
        return []

    # ===========================
    # Reputation: queries
    # ===========================
    def _query(self, subject: int, now: int, purpose: tuple, want_log: bool = False) -> List[Action]:
        cached = self.rep_cache.get(subject)
        if not want_log and cached is not None and now - cached[1] < self.settings.report_period_ms:
            return self._on_resolved(subject, cached[0], (), [purpose], now)

        open_id = self._open_queries.get((subject, want_log))
        if open_id is not None:
            self.queries[open_id].purposes.append(purpose)
            return []

        holders = tuple(self.locate(subject))
        query_id = self.next_query_id
        self.next_query_id += 1
        pending = PendingQuery(subject, holders, want_log, [purpose])
        self.queries[query_id] = pending
        self._open_queries[(subject, want_log)] = query_id

        actions: List[Action] = []
        for holder in holders:
            if holder == self.id:
                value, log = self._holder_answer(subject, want_log, now)
                pending.values[holder] = value
                if log:
                    pending.log = log
            else:
                actions.append(self._send(MessageKind.REP_QUERY, holder,
                                          RepQueryPayload(query_id, subject, want_log)))
        if len(pending.values) == len(holders):
            return actions + self._finish_query(query_id, now)
        actions.append(SetTimer('query', self.settings.query_timeout_ms, query_id))
        return actions

    def _holder_answer(self, subject: int, want_log: bool, now: int) -> Tuple[float, Tuple]:
        record = self.records.get(subject)
        if record is None:
            return config.INITIAL_REPUTATION, ()
        value = current_value(record, now, self.params)
        if self.settings.malicious_holders and self.policy.strategy is not None:
            value = self.policy.strategy.falsify(value)
        log = tuple(record.last_reporters) if want_log else ()
        return value, log

    def _on_rep_query(self, sender: int, payload: RepQueryPayload, now: int) -> List[Action]:
        value, log = self._holder_answer(payload.subject, payload.want_log, now)
        if payload.subject not in self.records:
            value = None
        return [self._send(MessageKind.REP_REPLY, sender,
                           RepReplyPayload(payload.query_id, payload.subject, value, log))]

    def _on_rep_reply(self, sender: int, payload: RepReplyPayload, now: int) -> List[Action]:
        pending = self.queries.get(payload.query_id)
        if pending is None or sender not in pending.holders:
            return []
        pending.values[sender] = config.INITIAL_REPUTATION if payload.value is None else payload.value
        if len(payload.log) > len(pending.log):
            pending.log = payload.log
        if len(pending.values) == len(pending.holders):
            return self._finish_query(payload.query_id, now)
        return []

    def _query_timeout(self, query_id: int, now: int) -> List[Action]:
        if query_id not in self.queries:
            return []
        pending = self.queries[query_id]
        if not pending.values:
            logger.debug(f"⚠ No holder of {pending.subject:#x} answered, using the initial value")
        return self._finish_query(query_id, now)

    def _finish_query(self, query_id: int, now: int) -> List[Action]:
        pending = self.queries.pop(query_id)
        self._open_queries.pop((pending.subject, pending.want_log), None)
        if pending.values:
            value = resolve_replicas(list(pending.values.values()), len(pending.holders))
        else:
            value = config.INITIAL_REPUTATION
        self.rep_cache[pending.subject] = (value, now)
        return self._on_resolved(pending.subject, value, pending.log, pending.purposes, now)

    def _on_resolved(self, subject: int, value: float, log: Tuple, purposes: List[tuple], now: int) -> List[Action]:
        actions: List[Action] = []
        for purpose in purposes:
            what = purpose[0]
            if what == 'admit':
                actions.extend(self._admit(purpose[1], value, now))
            elif what == 'report':
                actions.extend(self._report_feeder(purpose[1], value, now))
            elif what == 'climb':
                self._climb_values[subject] = value
                actions.extend(self._climb_decide(purpose[1], purpose[2], now))
            elif what == 'audit':
                actions.extend(self._finish_audit(value, log, now))
            elif what == 'verify':
                self._apply_update(purpose[1], purpose[2], value, now)
            elif what == 'child':
                entry = self.tables.omt.children.get(subject)
                if entry is not None:
                    entry.reputation = value
        return actions

    # ===========================
    # Reputation: updates
    # ===========================
    def _rep_update(self, target: int, value: float, own: float, kind: ReportKind, now: int) -> List[Action]:
        payload = RepUpdatePayload(target, value, own, kind)
        actions: List[Action] = []
        for holder in self.locate(target):
            if holder == self.id:
                actions.extend(self._receive_report(self.id, payload, now))
            else:
                actions.append(self._send(MessageKind.REP_UPDATE, holder, payload))
        return actions

    def _report_feeder(self, feeder: int, own: float, now: int) -> List[Action]:
        if feeder != self.parent:
            return []
        return self._rep_update(feeder, self.policy.feeder_report(own), own, ReportKind.FEEDER, now)

    def _receive_report(self, reporter: int, payload: RepUpdatePayload, now: int) -> List[Action]:
        """Judge a report against the reporter's reputation as this holder sees it."""
        record = self.records.get(reporter)
        if record is not None:
            self._apply_update(reporter, payload, current_value(record, now, self.params), now)
            return []
        return self._query(reporter, now, ('verify', reporter, payload))

    def _apply_update(self, reporter: int, payload: RepUpdatePayload, reporter_rep: float,
                      now: int) -> UpdateOutcome:
        outcome = receive_update(self.records, payload.target, payload.value, reporter,
                                 reporter_rep, payload.kind, now, self.params,
                                 self.settings.audit_tolerance, claimed_rep=payload.reporter_rep)
        self.observe('report', reporter=reporter, target=payload.target, kind=payload.kind,
                     outcome=outcome, holder=self.id, at=now)
        return outcome

    def _on_rep_update(self, sender: int, payload: RepUpdatePayload, now: int) -> List[Action]:
        return self._receive_report(sender, payload, now)

    # ===========================
    # Reputation: audit and credit
    # ===========================
    def _audit_tick(self, now: int) -> List[Action]:
        actions: List[Action] = [SetTimer('audit', self.settings.audit_period_ms)]
        children = self.tables.omt.children
        if not children or not self.policy.forwards:
            return actions
        window = self.settings.audit_window_ms
        for child in sorted(children):
            cached = self.rep_cache.get(child)
            if cached is None or now - cached[1] >= window:
                actions.extend(self._query(child, now, ('child',)))
        actions.extend(self._query(self.id, now, ('audit',), want_log=True))
        return actions

    def _finish_audit(self, own: float, log: Tuple, now: int) -> List[Action]:
        children = self.tables.omt.children
        if not children:
            return []
        window = self.settings.audit_window_ms
        window_start = now - window
        record = RepRecord(self.id, Reputation(own, now), deque(log, maxlen=config.REPORTER_LOG_CAPACITY))
        expected = [c for c, entry in children.items() if entry.admitted_at <= window_start]
        child_reps = {c: entry.reputation for c, entry in children.items()}
        result = audit_reporters(record, expected, window_start, child_reps, self.settings.audit_tolerance)

        reported = {e.reporter for e in log if e.at >= window_start and e.kind is ReportKind.FEEDER}
        actions: List[Action] = []
        for child in sorted(children):
            entry = children[child]
            if child in result.flagged():
                entry.penalty = self.settings.audit_penalty
                continue
            entry.penalty = 0.0
            if child in reported:
                actions.extend(self._rep_update(child, own, own, ReportKind.CREDIT, now))
        return actions

    def snapshot(self) -> Dict:
        state = self.tables.snapshot()
        state.update({
            'role': self.role.value,
            'policy': self.policy.label,
            'ancestry': list(self.ancestry),
            'departed': self.departed,
            'pending_join': self.pending_join.target if self.pending_join else None,
        })
        return state
