from __future__ import annotations

import json
import logging
from typing import Optional

from ..bus import BusClient
from ..entries import Entry, LogActError, Policy, PayloadType, canonical_json
from ..policies import DriverElection, MalformedPolicy, payload_policy
from ..snapshots import CorruptSnapshot, Snapshot

log = logging.getLogger(__name__)


class Crash(BaseException):
    """Abrupt termination of a component (injected by tests and the harness).

    Derives from BaseException so that ``except Exception`` inside component
    code cannot swallow it.
    """


class Fenced(LogActError):
    """A driver observed a newer election and must stop."""


class EpochTracker:
    """Driver elections seen so far, in log order.

    The epoch an election establishes is its ordinal among election entries,
    so two concurrent elections always end up with distinct epochs and the
    one at the later position wins.
    """

    def __init__(self):
        self.elections: list[tuple[int, str]] = []

    def observe(self, entry: Entry) -> Optional[int]:
        p = entry.payload
        if isinstance(p, Policy) and p.kind == "driver_election":
            try:
                election = payload_policy(p)
            except MalformedPolicy as exc:
                log.warning("ignoring malformed election at %d: %s", entry.position, exc)
                return None
            assert isinstance(election, DriverElection)
            self.elections.append((entry.position, election.candidate))
            return len(self.elections)
        return None

    @property
    def current(self) -> int:
        return len(self.elections)

    def valid(self, epoch: int) -> bool:
        """Whether an entry stamped ``epoch`` and played now is from the live driver."""
        return epoch == len(self.elections)

    def to_list(self) -> list:
        return [list(e) for e in self.elections]

    @classmethod
    def from_list(cls, items) -> "EpochTracker":
        t = cls()
        t.elections = [(int(p), str(c)) for p, c in items]
        return t


class Component:
    """A loop of play -> act -> append over a subset of entry types.

    ``play`` folds one entry into the component state; the state is always the
    fold of the log prefix ``[0, played_up_to)``.  ``act`` appends whatever the
    state obliges and, after each append, catches up so that the appended entry
    is folded like any other.  Recovery is therefore snapshot + replay.
    """

    role = ""
    wait_types: frozenset[PayloadType] = frozenset()

    def __init__(self, client: BusClient, component_id: str, snapshots=None, snapshot_every: int = 0):
        self.client = client
        self.component_id = component_id
        self.snapshots = snapshots
        self.snapshot_every = snapshot_every
        self.played_up_to = 0
        self._since_snapshot = 0

    # -- to override --------------------------------------------------------------

    def play(self, entry: Entry) -> None:
        raise NotImplementedError

    def act(self) -> bool:
        return False

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state(self, state: dict) -> None:
        raise NotImplementedError

    def next_deadline(self) -> Optional[int]:
        """Clock time (ms) at which the component wants to act even without new entries."""
        return None

    # -- driving --------------------------------------------------------------------

    def catch_up(self) -> int:
        tail = self.client.tail()
        if tail <= self.played_up_to:
            return 0
        entries = self.client.read(self.played_up_to, tail)
        for e in entries:
            self.play(e)
        self._since_snapshot += tail - self.played_up_to
        self.played_up_to = tail
        return len(entries)

    def step(self) -> bool:
        played = self.catch_up()
        if self.snapshots is not None and self.snapshot_every and self._since_snapshot >= self.snapshot_every:
            self.snapshot()
        acted = self.act()
        return bool(played) or acted

    def wait(self, timeout: float) -> None:
        if self.wait_types:
            self.client.poll(self.played_up_to, self.wait_types, timeout)

    # -- snapshots ------------------------------------------------------------------

    def snapshot(self) -> None:
        state = canonical_json(self.state_dict())
        self.snapshots.put(Snapshot(self.component_id, self.played_up_to, state, self.client.bus.clock.now_ms()))
        self._since_snapshot = 0

    def restore(self) -> bool:
        """Load the latest snapshot if there is a usable one."""
        if self.snapshots is None:
            return False
        try:
            snap = self.snapshots.get_latest(self.component_id)
        except CorruptSnapshot as exc:
            log.warning("%s: %s; replaying from position 0", self.component_id, exc)
            return False
        if snap is None:
            return False
        self.load_state(json.loads(snap.state))
        self.played_up_to = snap.log_position
        return True

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.component_id} @{self.played_up_to}>"
