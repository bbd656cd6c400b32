"""
RepStream - Error Types
Exceptions raised by the protocol engine, the reputation layer and the simulator
"""

from typing import List, Optional


class RepStreamError(Exception):
    """Base exception for RepStream errors."""
    pass


class ClockViolation(RepStreamError, ValueError):
    """Raised when an update would move a reputation backwards in time."""
    pass


class NoDataError(RepStreamError, ValueError):
    """Raised when replica resolution receives no values."""
    pass


class NonContractiveError(RepStreamError, ValueError):
    """Raised when a fixed point would need a non-positive denominator."""
    pass


class MalformedMessage(RepStreamError, ValueError):
    """Raised for a message whose payload does not match its kind."""
    pass


class ProtocolViolation(RepStreamError, RuntimeError):
    """Raised when a peer handler is driven outside its state machine."""
    pass


class NoHoldersError(RepStreamError, RuntimeError):
    """Raised when the reputation layer has no live peer to place a record on."""
    pass


class QueryTimeout(RepStreamError, RuntimeError):
    """Raised when no replica holder answered a reputation query."""
    pass


class StreamConflict(RepStreamError, ValueError):
    """Raised on a second registration of the same stream."""
    pass


class StreamNotFound(RepStreamError, KeyError):
    """Raised on lookup of an unregistered stream."""
    pass


class SchedulingViolation(RepStreamError, ValueError):
    """Raised when an event is scheduled before the current simulation time."""
    pass


class SimulationAbort(RepStreamError, RuntimeError):
    """Raised when a handler fails; carries the event being processed."""

    def __init__(self, event, cause: Exception):
        self.event = event
        self.cause = cause
        super().__init__(f"run aborted at {event!r}: {cause!r}")


class ScenarioError(RepStreamError, ValueError):
    """Raised for an invalid scenario; carries line-anchored messages."""

    def __init__(self, messages: List[str], path: Optional[str] = None):
        self.messages = list(messages)
        self.path = path
        prefix = f"{path}: " if path else ""
        super().__init__(f"Scenario errors:\n" + "\n".join(prefix + m for m in self.messages))


class EquilibriumViolation(RepStreamError, AssertionError):
    """Raised when the measured payoff ordering contradicts the expected one."""
    pass
