"""Backend equivalence and crash durability checks for the bus itself.

``compare_backends`` drives a memory bus and a durable bus through the same
random operation sequence and diffs every observable result.  ``kill_trials``
SIGKILLs a writer process at random moments and checks that every append it
had acknowledged survives.
"""

from __future__ import annotations

import logging
import os
import random
import signal
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..bus import MemoryBus
from ..clock import VirtualClock
from ..durable import DurableBus
from ..entries import (
    ALL_TYPES,
    ActionSpec,
    Abort,
    ClientIdentity,
    Commit,
    InfIn,
    InfOut,
    Intent,
    LogActError,
    Mail,
    Message,
    PayloadType,
    Permissions,
    Policy,
    Result,
    Vote,
    role_identity,
)

log = logging.getLogger(__name__)

ROLES = ("driver", "voter", "decider", "executor", "user", "admin", "auditor")
_TYPES = sorted(ALL_TYPES, key=lambda t: t.value)
_WORDS = ["alpha", "beta", "gamma", "delta", "ünïcode", "", "x" * 300, "line\nbreak"]


_KIND_OF = {
    PayloadType.MAIL: 0, PayloadType.INF_IN: 1, PayloadType.INF_OUT: 2, PayloadType.INTENT: 3, PayloadType.VOTE: 4,
    PayloadType.COMMIT: 5, PayloadType.ABORT: 6, PayloadType.RESULT: 7, PayloadType.POLICY: 8,
}


def random_payload(rng: random.Random, allowed=None):
    """Any payload; with ``allowed``, one of those types (when non-empty)."""
    word = lambda: rng.choice(_WORDS)  # noqa: E731
    pos = rng.randint(0, 30)
    kind = _KIND_OF[rng.choice(sorted(allowed, key=lambda t: t.value))] if allowed else rng.randrange(9)
    if kind == 0:
        return Mail(word(), word())
    if kind == 1:
        return InfIn(tuple(Message(rng.choice(["system", "user", "tool"]), word()) for _ in range(rng.randint(0, 3))), rng.randint(0, 3))
    if kind == 2:
        return InfOut(word(), rng.random() < 0.5, rng.randint(0, 3))
    if kind == 3:
        return Intent(ActionSpec(rng.choice(["shell", "builtin"]), "echo " + word()), rng.randint(0, 3), rng.randint(0, 9))
    if kind == 4:
        return Vote(pos, rng.choice(["rule", "llm"]), word(), rng.choice(["approve", "reject"]), word())
    if kind == 5:
        return Commit(pos)
    if kind == 6:
        return Abort(pos, word())
    if kind == 7:
        return Result(rng.choice([pos, None]), rng.choice(["ok", "error"]), word())
    doc = rng.choice([
        {"kind": "decider", "expr": "first_voter"},
        {"kind": "driver_election", "candidate": word() or "d", "epoch": rng.randint(1, 4)},
        {"kind": "voter", "target": "rule", "body": {"default": "approve"}},
    ])
    return Policy(doc["kind"], word(), doc)


def random_ops(rng: random.Random, n: int) -> list[tuple]:
    """Mostly permitted operations, with a steady share of denied and invalid ones."""
    ops: list[tuple] = []
    for _ in range(n):
        r = rng.random()
        who = rng.choice(ROLES + ("stranger",))
        perms = _identity(who).permissions
        lawful = rng.random() < 0.8
        if r < 0.45:
            ops.append(("append", who, random_payload(rng, perms.appendable if lawful else None)))
        elif r < 0.6:
            a = rng.randint(0, 12) if lawful else rng.randint(-1, 25)
            b = a + rng.randint(0, 15) if lawful else rng.randint(-1, 25)
            ops.append(("read", who, a, b))
        elif r < 0.75:
            pool = sorted(perms.pollable, key=lambda t: t.value) if lawful and perms.pollable else _TYPES
            k = rng.randint(1, min(3, len(pool))) if lawful else rng.randint(0, 3)
            ops.append(("poll", who, rng.randint(0, 12), frozenset(rng.sample(pool, k))))
        elif r < 0.82:
            ops.append(("tail",))
        elif r < 0.89:
            ops.append(("advance", rng.choice([0, 1, 7, 1000])))
        elif r < 0.95:
            ops.append(("register", f"extra{rng.randint(0, 2)}", rng.choice(ROLES)))
        else:
            ops.append(("reopen",))
    return ops


def _identity(who: str) -> ClientIdentity:
    if who == "stranger":
        return ClientIdentity("stranger", Permissions(ALL_TYPES, ALL_TYPES, ALL_TYPES))
    return role_identity(who)


class _Subject:
    """One backend under test plus the bookkeeping to reopen it."""

    def __init__(self, kind: str, path: Optional[Path], sync_mode: str):
        self.kind, self.path, self.sync_mode = kind, path, sync_mode
        self.clock = VirtualClock()
        self.bus = self._open()
        for role in ROLES:
            self.bus.register(role_identity(role))

    def _open(self):
        if self.kind == "memory":
            return MemoryBus(self.clock)
        return DurableBus(self.path, self.sync_mode, self.clock)

    def apply(self, op: tuple) -> Any:
        name = op[0]
        try:
            if name == "append":
                return self.bus.append(_identity(op[1]), op[2])
            if name == "read":
                return self.bus.read(_identity(op[1]), op[2], op[3])
            if name == "poll":
                return self.bus.poll(_identity(op[1]), op[2], op[3], timeout=0)
            if name == "tail":
                return self.bus.tail()
            if name == "advance":
                self.clock.advance(op[1])
                return None
            if name == "register":
                return self.bus.register(role_identity(op[2], op[1]))
            if name == "reopen":
                if self.kind == "durable":
                    self.bus.close()
                    self.bus = self._open()
                return None
        except (LogActError, ValueError) as exc:
            return ("error", type(exc).__name__)
        raise ValueError(f"unknown op {name}")

    def close(self) -> None:
        self.bus.close()


@dataclass
class EquivalenceReport:
    sequences: int
    operations: int
    mismatches: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.mismatches


def compare_sequence(ops: list[tuple], path: Path, sync_mode: str = "always") -> Optional[dict]:
    """Run ``ops`` on both backends; the first differing observation, or None."""
    mem, dur = _Subject("memory", None, sync_mode), _Subject("durable", path, sync_mode)
    try:
        for i, op in enumerate(ops):
            a, b = mem.apply(op), dur.apply(op)
            if a != b:
                return {"index": i, "op": op, "memory": a, "durable": b}
        final_a = mem.bus.read(role_identity("auditor"), 0, mem.bus.tail())
        final_b = dur.bus.read(role_identity("auditor"), 0, dur.bus.tail())
        if final_a != final_b:
            return {"index": len(ops), "op": ("final",), "memory": len(final_a), "durable": len(final_b)}
        return None
    finally:
        mem.close()
        dur.close()


def compare_backends(n_sequences: int = 10_000, seed: int = 0, ops_per_sequence: int = 40,
                     sync_mode: str = "always", workdir=None) -> EquivalenceReport:
    t0 = time.monotonic()
    rep = EquivalenceReport(n_sequences, 0)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for k in range(n_sequences):
            rng = random.Random(seed * 1_000_003 + k)
            ops = random_ops(rng, rng.randint(1, ops_per_sequence))
            rep.operations += len(ops)
            path = Path(tmp) / f"seq{k}.log"
            bad = compare_sequence(ops, path, sync_mode)
            if bad is not None:
                rep.mismatches.append({"sequence": k, **bad})
            for p in (path, Path(str(path) + ".acl.json")):
                if p.exists():
                    p.unlink()
    rep.seconds = time.monotonic() - t0
    return rep


# -- kill trials ------------------------------------------------------------------------

_ACK = struct.Struct(">Q")
WRITER = role_identity("user", "kill-writer")


def expected_body(trial: int, i: int) -> str:
    return f"trial {trial} append {i} " + "z" * ((trial * 31 + i * 17) % 900)


def _writer(path: Path, trial: int, w: int) -> None:
    bus = DurableBus(path, "always")
    bus.register(WRITER)
    i = 0
    while True:
        pos = bus.append(WRITER, Mail("kill-writer", expected_body(trial, i)))
        os.write(w, _ACK.pack(pos))  # acknowledged only once append returned
        i += 1


def _read_acks(r: int, first_only: bool = False) -> list[int]:
    buf = b""
    while True:
        want = _ACK.size - len(buf) % _ACK.size if first_only else 65536
        chunk = os.read(r, want)
        if not chunk:
            break
        buf += chunk
        if first_only and len(buf) >= _ACK.size:
            break
    n = len(buf) // _ACK.size
    return [_ACK.unpack_from(buf, i * _ACK.size)[0] for i in range(n)]


@dataclass
class KillReport:
    trials: int
    acknowledged: int
    lost: list[tuple[int, int]] = field(default_factory=list)  # (trial, position)
    wrong: list[tuple[int, int]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.lost and not self.wrong


def kill_trials(n: int = 200, seed: int = 0, workdir=None, max_delay_s: float = 0.03) -> KillReport:
    """Fork a writer, SIGKILL it after a random delay, check every acked append survived.

    All trials share one log file, so each trial also exercises recovery from
    whatever torn tail the previous kill left behind.
    """
    rng = random.Random(seed)
    t0 = time.monotonic()
    rep = KillReport(n, 0)
    auditor = role_identity("auditor", "kill-auditor")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = Path(tmp) / "kill.log"
        for trial in range(n):
            r, w = os.pipe()
            pid = os.fork()
            if pid == 0:  # child
                os.close(r)
                try:
                    _writer(path, trial, w)
                finally:
                    os._exit(1)
            os.close(w)
            acks = _read_acks(r, first_only=True)
            time.sleep(rng.uniform(0, max_delay_s))
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
            acks += _read_acks(r)
            os.close(r)
            rep.acknowledged += len(acks)

            bus = DurableBus(path, "always")
            try:
                bus.register(auditor)
                tail = bus.tail()
                base = acks[0] if acks else tail
                got = {e.position: e.payload for e in bus.read(auditor, base, tail)}
            finally:
                bus.close()
            for i, pos in enumerate(acks):
                if pos not in got:
                    rep.lost.append((trial, pos))
                elif got[pos] != Mail("kill-writer", expected_body(trial, i)):
                    rep.wrong.append((trial, pos))
    rep.seconds = time.monotonic() - t0
    log.info("kill trials: %d trials, %d acked appends, %d lost", n, rep.acknowledged, len(rep.lost))
    return rep
