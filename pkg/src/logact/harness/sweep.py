"""Crash-point sweeps: kill one component at every append boundary and recover."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from ..entries import Commit, Entry, Intent
from .sim import Fault, Simulation

log = logging.getLogger(__name__)

REPLAYED_ROLES = ("driver", "decider", "voter")


def _body(entries: list[Entry], pos) -> str:
    p = entries[int(pos)].payload
    return p.action.body if isinstance(p, Intent) else f"?{pos}"


def position_free_state(slot, entries: list[Entry]) -> dict:
    """A component's state with log positions replaced by what they point at.

    Crashing a driver adds an election entry, which shifts every later
    position; comparing through this view keeps the comparison exact on
    content while ignoring where things landed.
    """
    st = slot.component.state_dict()
    if slot.role == "driver":
        return {k: st[k] for k in ("conversation", "inbox", "turn", "awaiting_output")} | {
            "pending_intent": None if st["pending_intent"] is None else _body(entries, st["pending_intent"]),
            "awaiting_action": st["awaiting_turn"] is not None,
        }
    if slot.role == "decider":
        committed = {e.payload.intent_position for e in entries if isinstance(e.payload, Commit)}
        return {
            "policy": st["policy"],
            "pending": [_body(entries, p) for p in st["pending"]],
            "decided": [(_body(entries, p), p in committed) for p in st["decided"]],
        }
    if slot.role == "voter":
        return {
            "configs": st["configs"],
            "pending": [_body(entries, p) for p in st["pending"]],
            "voted": [_body(entries, p) for p in st["voted"]],
            "seen_votes": {_body(entries, p): [(v["voter_type"], v["verdict"]) for v in vs] for p, vs in st["seen_votes"].items()},
            "last_context": st["last_context"],
        }
    raise ValueError(slot.role)


def final_views(sim: Simulation) -> dict[str, dict]:
    entries = sim.entries()
    views = {}
    for s in sim.slots.values():
        if s.role in REPLAYED_ROLES and s.state == "live":
            s.component.catch_up()
            views[s.name] = position_free_state(s, entries)
    return views


@dataclass
class SweepRun:
    index: int
    when: str
    ok: bool
    problems: list[str] = field(default_factory=list)


@dataclass
class SweepReport:
    scenario: str
    component: str
    boundaries: int
    runs: list[SweepRun]

    @property
    def violations(self) -> list[SweepRun]:
        return [r for r in self.runs if not r.ok]

    @property
    def first_violation(self) -> Optional[SweepRun]:
        bad = self.violations
        return bad[0] if bad else None

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        first = self.first_violation
        tail = f"; first violation at append {first.index} ({first.when}): {first.problems[:2]}" if first else ""
        return f"{self.scenario}/{self.component}: {len(self.runs)} crash runs over {self.boundaries} appends, {len(self.violations)} violating{tail}"


def crash_point_sweep(scenario, component: str, seed: int = 0, compare_replay: Optional[bool] = None) -> SweepReport:
    """Kill ``component`` before and after each of its appends, one run per point.

    Each run must satisfy every invariant and scenario oracle.  For driver,
    decider and voter sweeps the final position-free state of every replayed
    component must also equal the uncrashed run's.
    """
    base = Simulation(scenario, seed)
    try:
        base.run()
        rep = base.report()
        if not rep.ok:
            raise RuntimeError(f"uncrashed run already fails: {rep.oracles}")
        n = base.slot(component).appends
        role = base.slot(component).role
        expected = final_views(base)
    finally:
        base.close()
    if compare_replay is None:
        compare_replay = role in REPLAYED_ROLES

    runs = []
    for i in range(n):
        for when in ("before", "after"):
            sc = scenario.replace(faults=[*scenario.faults, Fault(component, "kill", at_append=i, when=when)])
            sim = Simulation(sc, seed)
            problems: list[str] = []
            try:
                sim.run()
                r = sim.report()
                problems += [f"{k}: {d}" for k, (ok, d) in r.oracles.items() if not ok]
                if not any(e.startswith("kill ") for e in sim.events):
                    problems.append("fault never fired")
                if compare_replay and not problems:
                    got = final_views(sim)
                    for name, view in expected.items():
                        if got.get(name) != view:
                            problems.append(f"state of {name} differs from the uncrashed run")
            finally:
                sim.close()
            runs.append(SweepRun(i, when, not problems, problems))
    report = SweepReport(scenario.name, component, n, runs)
    log.info(report.summary())
    return report
