"""Independent checks over a finished (or partial) log.

Nothing here reuses the component folds: epochs, in-flight tracking and
quorum decisions are recomputed from the raw entries so that a bug shared by
a component and its checker cannot hide itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from ..entries import Abort, Commit, Entry, InfOut, Intent, PayloadType, Policy, Result, Vote
from ..inference import extract

T = PayloadType

# Who may append what, written out independently of the bus ACL tables.
ROLE_APPENDS: dict[str, frozenset[PayloadType]] = {
    "driver": frozenset({T.INF_IN, T.INF_OUT, T.INTENT, T.POLICY}),
    "voter": frozenset({T.VOTE}),
    "decider": frozenset({T.COMMIT, T.ABORT}),
    "executor": frozenset({T.RESULT}),
    "user": frozenset({T.MAIL}),
    "admin": frozenset({T.MAIL, T.POLICY}),
    "auditor": frozenset(),
}
EXECUTOR_FORBIDDEN = frozenset({T.VOTE, T.COMMIT, T.ABORT, T.POLICY})

INVARIANTS = (
    "commit_before_execute",
    "single_in_flight",
    "fencing",
    "no_duplicate_execution",
    "acl",
    "enforced_safety",
)


@dataclass(frozen=True)
class Violation:
    invariant: str
    positions: tuple[int, ...]
    detail: str

    def __str__(self) -> str:
        return f"{self.invariant} at {list(self.positions)}: {self.detail}"


# -- quorum oracle ----------------------------------------------------------------


def _expr(doc: Optional[dict]) -> tuple[str, tuple[str, ...], int]:
    if not doc:
        return "on_by_default", (), 0
    e = str(doc.get("expr", "")).lower()
    e = {"boolean_or": "or", "boolean_and": "and"}.get(e, e)
    return e, tuple(doc.get("types", ())), int(doc.get("k", 0) or 0)


def _holds(expr: str, types: tuple[str, ...], k: int, approved: dict[str, bool]) -> bool:
    vals = [approved[t] for t in types]
    if expr == "or":
        return any(vals)
    if expr == "and":
        return all(vals)
    if expr == "threshold":
        return sum(vals) >= k
    raise ValueError(f"unknown expression {expr!r}")


def oracle_decision(doc: Optional[dict], votes: Sequence[tuple[str, str]]) -> str:
    """Brute force: decided iff every completion of the missing votes agrees.

    ``votes`` are (voter_type, verdict) pairs in log order.
    """
    expr, types, k = _expr(doc)
    if expr == "on_by_default":
        return "commit"
    if expr == "first_voter":
        if not votes:
            return "undecided"
        return "commit" if votes[0][1] == "approve" else "abort"
    known: dict[str, bool] = {}
    for t, verdict in votes:
        if t not in known:
            known[t] = verdict == "approve"
    missing = [t for t in dict.fromkeys(types) if t not in known]
    outcomes = set()
    for combo in itertools.product((False, True), repeat=len(missing)):
        full = {**known, **dict(zip(missing, combo))}
        outcomes.add(_holds(expr, types, k, full))
    if outcomes == {True}:
        return "commit"
    if outcomes == {False}:
        return "abort"
    return "undecided"


# -- invariant suite --------------------------------------------------------------


@dataclass
class LogEvidence:
    entries: list[Entry]
    attribution: dict[int, str] = field(default_factory=dict)  # position -> role
    executions: list[tuple[int, int]] = field(default_factory=list)  # (intent pos, tail when started)


def election_counts(entries: Sequence[Entry]) -> list[int]:
    """Elections strictly before each position, plus one entry for the end of the log."""
    counts, n = [], 0
    for e in entries:
        counts.append(n)
        if isinstance(e.payload, Policy) and e.payload.kind == "driver_election":
            n += 1
    counts.append(n)
    return counts


def _valid(entries, counts, pos) -> bool:
    p = entries[pos].payload
    epoch = getattr(p, "driver_epoch", getattr(p, "epoch", None))
    return epoch == counts[pos]


def check_log(ev: LogEvidence, which: Iterable[str] = INVARIANTS) -> list[Violation]:
    entries = ev.entries
    which = set(which)
    for i, e in enumerate(entries):
        if e.position != i:
            return [Violation("dense_positions", (i,), f"entry {i} carries position {e.position}")]
    counts = election_counts(entries)
    out: list[Violation] = []

    intents = {e.position: e.payload for e in entries if isinstance(e.payload, Intent)}
    valid_intents = {p for p in intents if _valid(entries, counts, p)}
    commits: dict[int, list[int]] = {}
    for e in entries:
        if isinstance(e.payload, Commit):
            commits.setdefault(e.payload.intent_position, []).append(e.position)

    if "commit_before_execute" in which:
        for e in entries:
            p = e.payload
            if isinstance(p, Result) and p.intent_position is not None:
                if not any(c < e.position for c in commits.get(p.intent_position, [])):
                    out.append(Violation("commit_before_execute", (e.position, p.intent_position), "result without an earlier commit"))
        for pos, tail in ev.executions:
            if not any(c < tail for c in commits.get(pos, [])):
                out.append(Violation("commit_before_execute", (pos,), f"executed with log tail {tail} but no commit before it"))

    if "single_in_flight" in which:
        inflight: set[int] = set()
        for e in entries:
            p = e.payload
            if isinstance(p, Intent) and e.position in valid_intents:
                if inflight:
                    out.append(Violation("single_in_flight", (e.position, *sorted(inflight)), "intent proposed while another is unresolved"))
                inflight.add(e.position)
            elif isinstance(p, Abort):
                inflight.discard(p.intent_position)
            elif isinstance(p, Result):
                if p.intent_position is not None:
                    inflight.discard(p.intent_position)
                inflight.difference_update(p.in_doubt)

    if "fencing" in which:
        for e in entries:
            p = e.payload
            ref = p.intent_position if isinstance(p, (Vote, Commit, Abort)) else None
            if ref is not None and ref not in valid_intents:
                out.append(Violation("fencing", (e.position, ref), f"{e.type.value} refers to a stale or missing intent"))
        for pos, _ in ev.executions:
            if pos not in valid_intents:
                out.append(Violation("fencing", (pos,), "stale intent executed"))
        proposed = None
        for e in entries:
            if isinstance(e.payload, InfOut) and _valid(entries, counts, e.position):
                proposed = extract(e.payload.text).action if e.payload.intent_extracted else None
            elif e.position in valid_intents and intents[e.position].action != proposed:
                out.append(Violation("fencing", (e.position,), "valid intent does not follow a live-epoch inference output proposing it"))

    if "no_duplicate_execution" in which:
        seen: dict[int, int] = {}
        for pos, _ in ev.executions:
            seen[pos] = seen.get(pos, 0) + 1
        for e in entries:
            p = e.payload
            if isinstance(p, Result) and p.intent_position is not None:
                seen.setdefault(p.intent_position, 0)
        results: dict[int, int] = {}
        for e in entries:
            if isinstance(e.payload, Result) and e.payload.intent_position is not None:
                results[e.payload.intent_position] = results.get(e.payload.intent_position, 0) + 1
        for pos, n in sorted(seen.items()):
            if n > 1 or results.get(pos, 0) > 1:
                out.append(Violation("no_duplicate_execution", (pos,), f"executed {n} times, {results.get(pos, 0)} results"))

    if "acl" in which:
        for e in entries:
            role = ev.attribution.get(e.position)
            if role is None:
                out.append(Violation("acl", (e.position,), "entry with no recorded appender"))
                continue
            if e.type not in ROLE_APPENDS.get(role, frozenset()):
                out.append(Violation("acl", (e.position,), f"{role} appended {e.type.value}"))
            elif role == "executor" and e.type in EXECUTOR_FORBIDDEN:
                out.append(Violation("acl", (e.position,), f"executor appended {e.type.value}"))
            elif role == "driver" and isinstance(e.payload, Policy) and e.payload.kind != "driver_election":
                out.append(Violation("acl", (e.position,), f"driver appended a {e.payload.kind} policy"))

    if "enforced_safety" in which:
        doc: Optional[dict] = None
        policy_at: dict[int, Optional[dict]] = {}
        votes: dict[int, list[tuple[str, str]]] = {}
        for e in entries:
            p = e.payload
            if isinstance(p, Policy) and p.kind == "decider":
                doc = p.body
            elif isinstance(p, Intent):
                policy_at[e.position] = doc
            elif isinstance(p, Vote):
                votes.setdefault(p.intent_position, []).append((p.voter_type, p.verdict))
            elif isinstance(p, (Commit, Abort)):
                ip = p.intent_position
                if ip not in policy_at:
                    continue  # reported by the fencing check
                verdict = oracle_decision(policy_at[ip], votes.get(ip, []))
                if isinstance(p, Commit) and verdict != "commit":
                    out.append(Violation("enforced_safety", (e.position, ip), f"commit while the quorum oracle says {verdict}"))
                if isinstance(p, Abort) and p.reason != "timeout" and verdict != "abort":
                    out.append(Violation("enforced_safety", (e.position, ip), f"abort while the quorum oracle says {verdict}"))
    return out
