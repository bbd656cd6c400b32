"""
RepStream - Core Model
Identifiers, reputation values, the protocol message vocabulary and the simulation clock
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NewType, Optional, Tuple

from src.errors import MalformedMessage

logger = logging.getLogger(__name__)

# ===========================
# Key Space
# ===========================
KEY_BITS = 64
KEY_SPACE = 1 << KEY_BITS
KEY_MASK = KEY_SPACE - 1

# 64-bit FNV-1a
FNV_OFFSET_BASIS = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3

FIELD_SEPARATOR = '\x1f'
REPUTATION_TAG = b'reputation'

# Node identifier on the circular key space
PeerId = NewType('PeerId', int)

# Milliseconds since scenario start
SimTime = NewType('SimTime', int)


def fnv1a_64(data: bytes) -> int:
    """
    64-bit FNV-1a digest.

    Args:
        data: Bytes to hash

    Returns:
        Unsigned 64-bit digest
    """
    digest = FNV_OFFSET_BASIS
    for byte in data:
        digest ^= byte
        digest = (digest * FNV_PRIME) & KEY_MASK
    return digest


def key_bytes(key: int) -> bytes:
    """8-byte big-endian encoding of a key."""
    return (key & KEY_MASK).to_bytes(8, 'big')


def make_peer_id(key: int) -> PeerId:
    """Validate a raw integer as a PeerId."""
    if not 0 <= key < KEY_SPACE:
        raise ValueError(f"peer key {key} outside [0, 2^{KEY_BITS})")
    return PeerId(key)


def circular_distance(a: int, b: int) -> int:
    """
    Distance between two keys on the 2^64 ring.

    Args:
        a: First key
        b: Second key

    Returns:
        min(|a - b|, 2^64 - |a - b|), never more than 2^63
    """
    diff = (a - b) & KEY_MASK
    return min(diff, KEY_SPACE - diff)


def replica_key(peer: int) -> int:
    """Ring position of a peer's reputation record."""
    return fnv1a_64(key_bytes(peer))


# ===========================
# Streams and Layers
# ===========================
class LayerKind(Enum):
    MEDIA = 'media'
    REPUTATION = 'reputation'


@dataclass(frozen=True, order=True)
class StreamId:
    """Stream identifier derived from the session metadata."""
    key: int


@dataclass(frozen=True)
class LayerId:
    """DHT layer identifier; media layer shares the stream key."""
    key: int
    kind: LayerKind


def hash_stream_id(title: str, speaker: str, date: str, time: str) -> StreamId:
    """
    Derive the StreamId of a session.

    Args:
        title: Session title
        speaker: Speaker name
        date: Session date text
        time: Session time text

    Returns:
        StreamId keyed by the FNV-1a digest of the fields joined with '\\x1f'
    """
    text = FIELD_SEPARATOR.join((title, speaker, date, time))
    return StreamId(fnv1a_64(text.encode('utf-8')))


def media_layer(stream: StreamId) -> LayerId:
    """Media layer of a stream."""
    return LayerId(stream.key, LayerKind.MEDIA)


def derive_reputation_layer(stream: StreamId) -> LayerId:
    """Reputation layer of a stream: digest of the stream key bytes and the tag."""
    return LayerId(fnv1a_64(key_bytes(stream.key) + REPUTATION_TAG), LayerKind.REPUTATION)


# ===========================
# Reputation
# ===========================
@dataclass(frozen=True)
class Reputation:
    """Reputation value in [0, 1] with the time of its last update."""
    value: float
    updated_at: int

    def __post_init__(self):
        # Out-of-range values are a bug in the caller, never clamped
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"reputation {self.value} outside [0, 1]")
        if self.updated_at < 0:
            raise ValueError(f"negative timestamp {self.updated_at}")


# ===========================
# Messages
# ===========================
class MessageKind(Enum):
    BEACON = 'beacon'
    JOIN_REQUEST = 'join_request'
    JOIN_ACCEPT = 'join_accept'
    JOIN_REJECT = 'join_reject'
    EVICT = 'evict'
    STREAM_CHUNK = 'stream_chunk'
    REP_UPDATE = 'rep_update'
    REP_QUERY = 'rep_query'
    REP_REPLY = 'rep_reply'
    STREAM_END = 'stream_end'
    LEAVE = 'leave'
    TABLE_EXCHANGE = 'table_exchange'


class ReportKind(Enum):
    FEEDER = 'feeder'    # child rating the peer that feeds it
    CREDIT = 'credit'    # feeder crediting a child that reported accurately


@dataclass(frozen=True)
class BeaconPayload:
    seq: int
    path: Tuple[int, ...]


@dataclass(frozen=True)
class JoinRequestPayload:
    lost_parent: Optional[int] = None


@dataclass(frozen=True)
class JoinAcceptPayload:
    grandparent: Optional[int]
    path: Tuple[int, ...] = ()


@dataclass(frozen=True)
class JoinRejectPayload:
    children: Tuple[int, ...] = ()


@dataclass(frozen=True)
class EvictPayload:
    siblings: Tuple[int, ...] = ()


@dataclass(frozen=True)
class StreamChunkPayload:
    seq: int
    origin_ts: int


@dataclass(frozen=True)
class RepUpdatePayload:
    target: int
    value: float
    reporter_rep: float
    kind: ReportKind = ReportKind.FEEDER

    def __post_init__(self):
        if not 0.0 <= self.reporter_rep <= 1.0:
            raise MalformedMessage(f"reporter snapshot {self.reporter_rep} outside [0, 1]")


@dataclass(frozen=True)
class RepQueryPayload:
    query_id: int
    subject: int
    want_log: bool = False


@dataclass(frozen=True)
class RepReplyPayload:
    query_id: int
    subject: int
    value: Optional[float]
    log: Tuple = ()


@dataclass(frozen=True)
class StreamEndPayload:
    pass


@dataclass(frozen=True)
class LeavePayload:
    pass


@dataclass(frozen=True)
class TableExchangePayload:
    """RT and NT entries offered to a neighbour; the receiver answers once unless reply is set."""
    entries: Tuple[int, ...]
    reply: bool = False


PAYLOAD_TYPES = {
    MessageKind.BEACON: BeaconPayload,
    MessageKind.JOIN_REQUEST: JoinRequestPayload,
    MessageKind.JOIN_ACCEPT: JoinAcceptPayload,
    MessageKind.JOIN_REJECT: JoinRejectPayload,
    MessageKind.EVICT: EvictPayload,
    MessageKind.STREAM_CHUNK: StreamChunkPayload,
    MessageKind.REP_UPDATE: RepUpdatePayload,
    MessageKind.REP_QUERY: RepQueryPayload,
    MessageKind.REP_REPLY: RepReplyPayload,
    MessageKind.STREAM_END: StreamEndPayload,
    MessageKind.LEAVE: LeavePayload,
    MessageKind.TABLE_EXCHANGE: TableExchangePayload,
}


@dataclass(frozen=True)
class Message:
    """
    One protocol packet.

    Raises:
        MalformedMessage: payload type does not match kind, or sender == receiver
    """
    kind: MessageKind
    sender: int
    receiver: int
    stream: StreamId
    payload: object

    def __post_init__(self):
        expected = PAYLOAD_TYPES[self.kind]
        if type(self.payload) is not expected:
            raise MalformedMessage(
                f"{self.kind.value} needs {expected.__name__}, got {type(self.payload).__name__}")
        if self.sender == self.receiver:
            raise MalformedMessage(f"{self.kind.value} addressed to its own sender {self.sender:#x}")
