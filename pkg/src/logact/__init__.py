"""logact: agent components that coordinate through a typed, append-only log."""

from .bus import AgentBus, BusClient, MemoryBus
from .clock import RealClock, VirtualClock
from .durable import CorruptLog, DurableBus, open_durable_bus
from .entries import (
    ActionSpec,
    ClientIdentity,
    Entry,
    PayloadType,
    Permissions,
    PermissionDenied,
    role_identity,
)
from .snapshots import MemorySnapshotStore, Snapshot, SnapshotStore

__all__ = [
    "ActionSpec",
    "AgentBus",
    "BusClient",
    "ClientIdentity",
    "CorruptLog",
    "DurableBus",
    "Entry",
    "MemoryBus",
    "MemorySnapshotStore",
    "PayloadType",
    "PermissionDenied",
    "Permissions",
    "RealClock",
    "Snapshot",
    "SnapshotStore",
    "VirtualClock",
    "open_durable_bus",
    "role_identity",
]
