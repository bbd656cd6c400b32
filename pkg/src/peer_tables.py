"""
RepStream - Peer Tables
The five per-stream overlay tables (RT, NT, BRT, OMT, BPT) with their capacity rules
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from src.config import (
    RT_CAPACITY, NT_CAPACITY, BRT_CAPACITY, BPT_GRANDPARENTS, BPT_SIBLINGS, FANOUT
)
from src.core_model import circular_distance

logger = logging.getLogger(__name__)


# ===========================
# Routing Table (RT)
# ===========================
class RoutingTable:
    """DHT membership view, at most RT_CAPACITY peers, never the owner."""

    def __init__(self, owner: int, capacity: int = RT_CAPACITY):
        self.owner = owner
        self.capacity = capacity
        self._entries: Dict[int, None] = {}

    @property
    def entries(self) -> List[int]:
        return list(self._entries)

    def __contains__(self, peer: int) -> bool:
        return peer in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def discard(self, peer: int):
        self._entries.pop(peer, None)


def rt_merge(table: RoutingTable, incoming: Iterable[int]) -> RoutingTable:
    """
    Merge peers into the routing table.

    Existing entries are kept first; new ones fill the remaining room in
    ascending circular distance from the owner (ties by PeerId).

    Args:
        table: Routing table to update in place
        incoming: Candidate peers

    Returns:
        The same table
    """
    fresh = {p for p in incoming if p != table.owner and p not in table._entries}
    room = table.capacity - len(table._entries)
    if room <= 0 or not fresh:
        return table
    ranked = sorted(fresh, key=lambda p: (circular_distance(table.owner, p), p))
    for peer in ranked[:room]:
        table._entries[peer] = None
    return table


# ===========================
# Neighbour Table (NT)
# ===========================
class NeighbourTable:
    """Lowest-RTT peers of the media layer, ascending by (rtt, PeerId)."""

    def __init__(self, owner: int, capacity: int = NT_CAPACITY):
        self.owner = owner
        self.capacity = capacity
        self.entries: List[Tuple[int, int]] = []  # (peer, rtt)

    def peers(self) -> List[int]:
        return [peer for peer, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def discard(self, peer: int):
        self.entries = [(p, r) for p, r in self.entries if p != peer]


def nt_update(table: NeighbourTable, candidate: int, rtt: int) -> NeighbourTable:
    """
    Insert or refresh a neighbour; the highest-RTT entry goes when over capacity.

    Raises:
        ValueError: negative rtt
    """
    if rtt < 0:
        raise ValueError(f"rtt must be >= 0, got {rtt}")
    if candidate == table.owner:
        return table
    entries = [(p, r) for p, r in table.entries if p != candidate]
    entries.append((candidate, rtt))
    entries.sort(key=lambda e: (e[1], e[0]))
    table.entries = entries[:table.capacity]
    return table


# ===========================
# Broadcast Routing Table (BRT)
# ===========================
class BroadcastRoutingTable:
    """Top beacon providers ranked by beacon count in a trailing window."""

    def __init__(self, owner: int, capacity: int = BRT_CAPACITY):
        self.owner = owner
        self.capacity = capacity
        self.entries: List[Tuple[int, float]] = []  # (peer, consistency_score)
        self._history: Dict[int, Deque[int]] = {}

    def peers(self) -> List[int]:
        return [peer for peer, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def discard(self, peer: int):
        self._history.pop(peer, None)
        self.entries = [(p, s) for p, s in self.entries if p != peer]


def brt_record_beacon(table: BroadcastRoutingTable, sender: int, now: int, window: int) -> BroadcastRoutingTable:
    """
    Count a beacon and re-rank providers.

    consistency_score(p) = beacons from p received in [now - window, now].
    """
    if sender == table.owner:
        return table
    table._history.setdefault(sender, deque()).append(now)
    horizon = now - window
    scores = []
    for peer in list(table._history):
        times = table._history[peer]
        while times and times[0] < horizon:
            times.popleft()
        if not times:
            del table._history[peer]
            continue
        scores.append((peer, float(len(times))))
    scores.sort(key=lambda e: (-e[1], e[0]))
    table.entries = scores[:table.capacity]
    return table


# ===========================
# Overlaid Multicast Table (OMT)
# ===========================
@dataclass
class ChildEntry:
    reputation: float
    last_keepalive: int
    admitted_at: int = 0
    penalty: float = 0.0

    @property
    def effective_reputation(self) -> float:
        return self.reputation - self.penalty


class AdmitOutcome(Enum):
    ACCEPT = 'accept'
    REJECT_FULL = 'reject_full'
    REPLACE = 'replace'


@dataclass(frozen=True)
class AdmitDecision:
    outcome: AdmitOutcome
    children: Tuple[int, ...] = ()      # RejectFull: current children; Replace: list handed to evicted
    evicted: Optional[int] = None


class OverlaidMulticastTable:
    """One parent plus at most `fanout` children."""

    def __init__(self, owner: int, fanout: int = FANOUT):
        if fanout < 1:
            raise ValueError(f"fanout must be >= 1, got {fanout}")
        self.owner = owner
        self.fanout = fanout
        self.parent: Optional[int] = None
        self.children: Dict[int, ChildEntry] = {}

    def set_parent(self, parent: Optional[int]):
        if parent is not None and (parent == self.owner or parent in self.children):
            raise ValueError(f"{parent:#x} cannot be parent of {self.owner:#x}")
        self.parent = parent

    def remove_child(self, child: int) -> bool:
        return self.children.pop(child, None) is not None

    def child_ids(self) -> List[int]:
        return list(self.children)

    def is_full(self) -> bool:
        return len(self.children) >= self.fanout


def _weakest_child(table: OverlaidMulticastTable) -> int:
    # lowest effective reputation; ties: farther on the ring, then larger id
    return max(table.children,
               key=lambda c: (-table.children[c].effective_reputation,
                              circular_distance(table.owner, c), c))


def omt_admit(table: OverlaidMulticastTable, requester: int, requester_rep: float, now: int = 0) -> AdmitDecision:
    """
    Decide on a join request and apply the decision to the table.

    Args:
        table: Owner's OMT, updated in place
        requester: Requesting peer (not a child, not the parent)
        requester_rep: Requester reputation from the reputation layer
        now: Admission time stamped on the new child entry

    Returns:
        Accept, RejectFull with the current children, or Replace with the evicted
        child and the children list it is handed (requester included)
    """
    if requester in table.children or requester == table.parent or requester == table.owner:
        raise ValueError(f"{requester:#x} is already linked to {table.owner:#x}")

    if len(table.children) < table.fanout:
        table.children[requester] = ChildEntry(requester_rep, now, now)
        return AdmitDecision(AdmitOutcome.ACCEPT)

    weakest = _weakest_child(table)
    if requester_rep > table.children[weakest].effective_reputation:
        del table.children[weakest]
        table.children[requester] = ChildEntry(requester_rep, now, now)
        logger.debug(f"{table.owner:#x} replaces {weakest:#x} with {requester:#x}")
        return AdmitDecision(AdmitOutcome.REPLACE, tuple(table.children), weakest)

    return AdmitDecision(AdmitOutcome.REJECT_FULL, tuple(table.children))


def omt_keepalive_sweep(table: OverlaidMulticastTable, now: int, timeout: int) -> Tuple[OverlaidMulticastTable, List[int]]:
    """
    Drop children whose last keepalive is older than now - timeout.

    The parent link is left alone.
    """
    removed = [c for c, entry in table.children.items() if entry.last_keepalive < now - timeout]
    for child in removed:
        del table.children[child]
    return table, removed


# ===========================
# Backup Parents Table (BPT)
# ===========================
class BackupParentsTable:
    """Grandparents and siblings for recovery, newest first."""

    def __init__(self, owner: int, grandparent_capacity: int = BPT_GRANDPARENTS,
                 sibling_capacity: int = BPT_SIBLINGS):
        self.owner = owner
        self.grandparent_capacity = grandparent_capacity
        self.sibling_capacity = sibling_capacity
        self.grandparents: List[int] = []
        self.siblings: List[int] = []

    def discard(self, peer: int):
        self.grandparents = [p for p in self.grandparents if p != peer]
        self.siblings = [p for p in self.siblings if p != peer]


def bpt_record(table: BackupParentsTable, grandparent: Optional[int], siblings: Sequence[int]) -> BackupParentsTable:
    """Prepend a grandparent and merge siblings, dropping the oldest beyond capacity."""
    if grandparent is not None and grandparent != table.owner:
        table.grandparents = [grandparent] + [g for g in table.grandparents if g != grandparent]
        del table.grandparents[table.grandparent_capacity:]

    fresh = []
    for sibling in siblings:
        if sibling != table.owner and sibling not in fresh:
            fresh.append(sibling)
    if fresh:
        table.siblings = fresh + [s for s in table.siblings if s not in fresh]
        del table.siblings[table.sibling_capacity:]
    return table


# ===========================
# Per-stream bundle
# ===========================
@dataclass
class PeerTables:
    """RT/NT/BRT/OMT/BPT owned by one peer for one stream."""
    owner: int
    fanout: int = FANOUT
    rt: RoutingTable = field(init=False)
    nt: NeighbourTable = field(init=False)
    brt: BroadcastRoutingTable = field(init=False)
    omt: OverlaidMulticastTable = field(init=False)
    bpt: BackupParentsTable = field(init=False)

    def __post_init__(self):
        self.rt = RoutingTable(self.owner)
        self.nt = NeighbourTable(self.owner)
        self.brt = BroadcastRoutingTable(self.owner)
        self.omt = OverlaidMulticastTable(self.owner, self.fanout)
        self.bpt = BackupParentsTable(self.owner)

    def forget(self, peer: int):
        """Remove a peer known to be gone from the recovery tables."""
        self.brt.discard(peer)
        self.bpt.discard(peer)

    def snapshot(self) -> Dict:
        return {
            'owner': self.owner,
            'parent': self.omt.parent,
            'children': sorted(self.omt.children),
            'rt_size': len(self.rt),
            'nt': self.nt.peers(),
            'brt': self.brt.peers(),
            'grandparents': list(self.bpt.grandparents),
            'siblings': list(self.bpt.siblings),
        }
