"""The AgentBus: a typed, append-only shared log with per-type access control.

``AgentBus`` keeps the position index in memory and is usable on its own as
the in-memory backend (``MemoryBus``).  The durable backend subclasses it and
adds a file underneath.
"""

from __future__ import annotations

import bisect
import logging
import threading
import time
from collections import defaultdict
from typing import Iterable, Optional

from .clock import RealClock
from .entries import (
    BusClosed,
    ClientIdentity,
    Entry,
    InvalidRange,
    Payload,
    PayloadType,
    Permissions,
    PermissionDenied,
    decode_payload,
    encode_payload,
    payload_type,
)

log = logging.getLogger(__name__)


class AgentBus:
    # Upper bound on a single wait inside poll; durable handles use it to notice
    # appends made by other processes.
    poll_interval = 0.05

    def __init__(self, clock=None):
        self.clock = clock or RealClock()
        self._cond = threading.Condition(threading.RLock())
        self._identities: dict[str, Permissions] = {}
        self._closed = False
        self._ts: list[int] = []
        self._types: list[PayloadType] = []
        self._data: list[bytes] = []
        self._by_type: dict[PayloadType, list[int]] = defaultdict(list)

    # -- identities ---------------------------------------------------------

    def register(self, identity: ClientIdentity) -> None:
        with self._cond:
            known = self._identities.get(identity.client_id)
            if known is not None and known != identity.permissions:
                raise ValueError(f"client id {identity.client_id!r} already registered with other permissions")
            self._identities[identity.client_id] = identity.permissions

    def identities(self) -> dict[str, Permissions]:
        with self._cond:
            return dict(self._identities)

    def _perms(self, client: ClientIdentity) -> Permissions:
        perms = self._identities.get(client.client_id)
        if perms is None:
            self._reload_identities()
            perms = self._identities.get(client.client_id)
        if perms is None:
            raise PermissionDenied(f"unknown client {client.client_id!r}")
        return perms

    def _reload_identities(self) -> None:
        pass

    # -- log API ----------------------------------------------------------------

    def append(self, client: ClientIdentity, payload: Payload) -> int:
        ptype = payload_type(payload)
        data = encode_payload(payload)
        with self._cond:
            if self._closed:
                raise BusClosed("bus is closed")
            perms = self._perms(client)
            if not perms.may_append(payload):
                raise PermissionDenied(f"{client.client_id!r} may not append {ptype}")
            pos = self._store(ptype, data)
            self._cond.notify_all()
            return pos

    def read(self, client: ClientIdentity, start: int, end: int) -> list[Entry]:
        if start > end:
            raise InvalidRange(f"start {start} > end {end}")
        if start < 0:
            raise InvalidRange(f"negative start {start}")
        with self._cond:
            readable = self._perms(client).readable
            self._refresh()
            end = min(end, len(self._types))
            return [self._entry(p) for p in range(start, end) if self._types[p] in readable]

    def tail(self, client: Optional[ClientIdentity] = None) -> int:
        with self._cond:
            self._refresh()
            return len(self._types)

    def poll(
        self,
        client: ClientIdentity,
        start: int,
        filter: Iterable[PayloadType],
        timeout: float = 0.0,
    ) -> list[Entry]:
        wanted = frozenset(filter)
        if not wanted:
            raise ValueError("poll filter must be non-empty")
        deadline = time.monotonic() + max(0.0, timeout)
        with self._cond:
            pollable = self._perms(client).pollable
            if not wanted <= pollable:
                bad = ", ".join(sorted(t.value for t in wanted - pollable))
                raise PermissionDenied(f"{client.client_id!r} may not poll {bad}")
            while True:
                if self._closed:
                    raise BusClosed("bus is closed")
                self._refresh()
                found = self._matching(start, wanted)
                if found:
                    return [self._entry(p) for p in found]
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(min(remaining, self.poll_interval))

    def session(self, client: ClientIdentity) -> "BusClient":
        return BusClient(self, client)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- accounting ---------------------------------------------------------

    def payload_bytes_by_type(self) -> dict[PayloadType, int]:
        with self._cond:
            self._refresh()
            out: dict[PayloadType, int] = defaultdict(int)
            for t, d in zip(self._types, self._data):
                out[t] += len(d)
            return dict(out)

    def bytes_per_second(self) -> float:
        """Payload bytes appended per second of bus wall-clock time."""
        with self._cond:
            self._refresh()
            if len(self._ts) < 2:
                return 0.0
            span = (self._ts[-1] - self._ts[0]) / 1000.0
            total = sum(len(d) for d in self._data)
            return total / span if span > 0 else float("inf")

    def raw_records(self, start: int = 0, end: Optional[int] = None) -> list[tuple[int, int, PayloadType, bytes]]:
        """(position, ts, type, payload bytes) without ACL filtering; for audit tooling."""
        with self._cond:
            self._refresh()
            end = len(self._types) if end is None else min(end, len(self._types))
            return [(p, self._ts[p], self._types[p], self._data[p]) for p in range(start, end)]

    # -- backend hooks --------------------------------------------------------

    def _next_ts(self) -> int:
        now = self.clock.now_ms()
        return max(now, self._ts[-1]) if self._ts else now

    def _store(self, ptype: PayloadType, data: bytes) -> int:
        pos = len(self._types)
        self._index(pos, self._next_ts(), ptype, data)
        return pos

    def _index(self, pos: int, ts: int, ptype: PayloadType, data: bytes) -> None:
        assert pos == len(self._types), (pos, len(self._types))
        self._ts.append(ts)
        self._types.append(ptype)
        self._data.append(data)
        self._by_type[ptype].append(pos)

    def _refresh(self) -> None:
        pass

    def _matching(self, start: int, wanted: frozenset[PayloadType]) -> list[int]:
        found: list[int] = []
        for t in wanted:
            positions = self._by_type.get(t)
            if positions:
                found.extend(positions[bisect.bisect_left(positions, start):])
        found.sort()
        return found

    def _entry(self, pos: int) -> Entry:
        return Entry(pos, self._ts[pos], decode_payload(self._types[pos], self._data[pos]))


class MemoryBus(AgentBus):
    """Non-durable backend: the log lives in this process only."""


class BusClient:
    """A bus handle bound to one identity."""

    def __init__(self, bus: AgentBus, identity: ClientIdentity):
        self.bus = bus
        self.identity = identity

    @property
    def client_id(self) -> str:
        return self.identity.client_id

    def append(self, payload: Payload) -> int:
        return self.bus.append(self.identity, payload)

    def read(self, start: int, end: int) -> list[Entry]:
        return self.bus.read(self.identity, start, end)

    def tail(self) -> int:
        return self.bus.tail(self.identity)

    def poll(self, start: int, filter: Iterable[PayloadType], timeout: float = 0.0) -> list[Entry]:
        return self.bus.poll(self.identity, start, filter, timeout)

    @property
    def permissions(self) -> Permissions:
        return self.bus._perms(self.identity)
