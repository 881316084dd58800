"""Deterministic single-threaded simulation of a LogAct deployment.

Every component runs in the harness thread.  A seeded scheduler decides the
order of component steps and, at each append, whether another component gets
to run first; this is how races (including zombie drivers) are produced
without real threads.  Faults are keyed to append counts, entry counts or
executor progress, never to wall-clock time.
"""

from __future__ import annotations

import hashlib
import logging
import random
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from ..bus import BusClient, MemoryBus
from ..clock import RealClock, VirtualClock
from ..components import Crash, Decider, Driver, Executor, Fenced
from ..components.recovery import driver_elect, recover_component
from ..components.voter import CallableBehavior, LLMBehavior, RuleBehavior, Voter
from ..durable import DurableBus
from ..entries import APPROVE, REJECT, Entry, LogActError, Mail, Policy, role_identity
from ..inference import load_adapter
from ..policies import parse_policy, policy_kind, policy_payload
from ..snapshots import MemorySnapshotStore, SnapshotStore
from .metrics import StageMetrics, stage_metrics
from .oracle import INVARIANTS, LogEvidence, Violation, check_log

log = logging.getLogger(__name__)

FAULT_KINDS = ("kill", "pause", "resume", "restart", "zombie")


class UnknownTarget(LogActError):
    pass


class OracleFailure(LogActError):
    def __init__(self, report: "ScenarioReport"):
        failed = [n for n, (ok, _) in report.oracles.items() if not ok]
        super().__init__(f"{report.scenario} seed={report.seed}: failed {failed}; {report.violations[:3]}")
        self.report = report


@dataclass
class Fault:
    """One fault.  Exactly one trigger should be set.

    ``at_entries``: when the log reaches that many entries.
    ``at_append``: inside the target's k-th append (0-based, across
    incarnations), ``when`` before or after the entry lands.
    ``at_item``: executor only, right after that work item's side effects.
    """

    target: str
    kind: str = "kill"
    at_entries: Optional[int] = None
    at_append: Optional[int] = None
    when: str = "before"
    at_item: Optional[int] = None
    restart: bool = True

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.when not in ("before", "after"):
            raise ValueError(f"fault 'when' must be before or after, not {self.when!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Fault":
        at = d.get("at", {})
        return cls(
            target=d["target"],
            kind=d.get("kind", "kill"),
            at_entries=at.get("entries"),
            at_append=at.get("append"),
            when=at.get("when", "before"),
            at_item=at.get("item"),
            restart=d.get("restart", True),
        )


@dataclass
class Slot:
    name: str
    role: str
    spec: dict
    state: str = "down"  # live | dead | paused | retired | down
    component: Any = None
    client: Any = None
    restart_pending: bool = False
    appends: int = 0
    incarnations: int = 0
    join_at: int = 0


class FaultyClient:
    """A bus session whose appends pass through the simulation's fault hooks."""

    def __init__(self, sim: "Simulation", slot: Slot, inner: BusClient):
        self.sim = sim
        self.slot = slot
        self.inner = inner
        self.bus = inner.bus
        self.identity = inner.identity

    @property
    def client_id(self) -> str:
        return self.inner.client_id

    def append(self, payload) -> int:
        slot = self.slot
        self.sim._before_append(slot, payload)
        pos = self.inner.append(payload)
        self.sim.attribution[pos] = slot.role
        k = slot.appends
        slot.appends += 1
        self.sim._after_append(slot, k)
        return pos

    def read(self, start, end):
        return self.inner.read(start, end)

    def tail(self):
        return self.inner.tail()

    def poll(self, start, filter, timeout=0.0):
        return self.inner.poll(start, filter, 0.0)

    def permissions(self):
        return self.inner.permissions()


@dataclass
class ScenarioReport:
    scenario: str
    seed: int
    ok: bool
    oracles: dict[str, tuple[bool, str]]
    violations: list[Violation]
    metrics: StageMetrics
    entries: int
    ticks: int
    stalled: bool
    sandbox_hash: str
    bus_path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "ok": self.ok,
            "oracles": {k: {"ok": ok, "detail": d} for k, (ok, d) in self.oracles.items()},
            "violations": [{"invariant": v.invariant, "positions": list(v.positions), "detail": v.detail} for v in self.violations],
            "metrics": self.metrics.to_dict(),
            "entries": self.entries,
            "ticks": self.ticks,
            "stalled": self.stalled,
            "sandbox_hash": self.sandbox_hash,
            "bus_path": self.bus_path,
        }

    def raise_for_failure(self) -> "ScenarioReport":
        if not self.ok:
            raise OracleFailure(self)
        return self


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file():
            h.update(f"F {rel}\n".encode())
            h.update(p.read_bytes())
        elif p.is_dir():
            h.update(f"D {rel}\n".encode())
    return h.hexdigest()


class Simulation:
    def __init__(self, scenario, seed: int = 0, workdir=None, on_restart=None):
        self.scenario = scenario
        self.seed = seed
        self.rng = random.Random(seed)
        self._own_dir = workdir is None
        self.workdir = Path(workdir or tempfile.mkdtemp(prefix=f"logact-{scenario.name}-"))
        self.sandbox = self.workdir / "sandbox"
        if self.sandbox.exists():
            shutil.rmtree(self.sandbox)
        self.sandbox.mkdir(parents=True)
        for rel, content in scenario.sandbox_files().items():
            p = self.sandbox / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(content)

        self.clock = RealClock() if scenario.clock == "real" else VirtualClock()
        if scenario.backend == "durable":
            bus_path = self.workdir / "bus.log"
            for stale in (bus_path, Path(str(bus_path) + ".acl.json")):
                if stale.exists():
                    stale.unlink()
            self.bus = DurableBus(bus_path, scenario.sync_mode, self.clock)
            self.snapshots = SnapshotStore(self.workdir / "snapshots", scenario.name, bus=self.bus)
        else:
            self.bus = MemoryBus(self.clock)
            self.snapshots = MemorySnapshotStore(bus=self.bus)
        for role in ("user", "admin", "auditor"):
            self.bus.register(role_identity(role))
        self.user = self.bus.session(role_identity("user"))
        self.admin = self.bus.session(role_identity("admin"))
        self.auditor = self.bus.session(role_identity("auditor"))
        self.attribution: dict[int, str] = {}
        self.executions: list[tuple[int, int]] = []
        self.adapter = scenario.build_adapter(self.clock)
        self.on_restart = on_restart

        self.slots: dict[str, Slot] = {}
        self.faults: list[Fault] = list(scenario.faults)
        self.workload: list[dict] = list(scenario.workload)
        self._stack: list[str] = []
        self.ticks = 0
        self.stalled = False
        self.events: list[str] = []

        # the starting decider policy goes on the log so the audit trail is self-contained
        if parse_policy(scenario.decider_policy) != parse_policy({"v": 1, "kind": "decider", "expr": "on_by_default"}):
            pos = self.admin.append(Policy("decider", "admin", scenario.decider_policy))
            self.attribution[pos] = "admin"
        self._add_slot("driver", "driver", {})
        for i in range(scenario.deciders):
            self._add_slot("decider" if i == 0 else f"decider{i + 1}", "decider", {})
        self._add_slot("executor", "executor", {})
        for v in scenario.voters:
            if v.get("join", "start") == "start":
                self._add_slot(f"voter:{v['id']}", "voter", v)

    # -- slots --------------------------------------------------------------------

    def _add_slot(self, name: str, role: str, spec: dict, late: bool = False) -> Slot:
        client_id = spec.get("id", name) if role == "voter" else name
        self.bus.register(role_identity(role, client_id))
        slot = Slot(name, role, spec)
        self.slots[name] = slot
        if late:
            slot.join_at = self.bus.tail()
        self._start(slot, first=True)
        return slot

    def _session(self, slot: Slot) -> FaultyClient:
        client_id = slot.spec.get("id", slot.name) if slot.role == "voter" else slot.name
        return FaultyClient(self, slot, self.bus.session(role_identity(slot.role, client_id)))

    def build_component(self, slot: Slot, client, snapshots=None):
        sc = self.scenario
        every = sc.snapshot_every
        if slot.role == "driver":
            return Driver(client, self.adapter, sc.system_prompt, candidate_id=f"driver#{slot.incarnations}",
                          snapshots=snapshots, snapshot_every=every, clock=self.clock)
        if slot.role == "decider":
            return Decider(client, component_id=slot.name, timeout_s=sc.vote_timeout_s, snapshots=snapshots, snapshot_every=every, clock=self.clock)
        if slot.role == "executor":
            return Executor(client, self.sandbox, builtins=sc.builtins, on_progress=self._progress,
                            on_execute=self._executed)
        if slot.role == "voter":
            v = Voter(client, self._behavior(slot.spec), voter_id=slot.spec["id"], voter_type=slot.spec.get("voter_type"),
                      join_at=slot.join_at, snapshots=snapshots, snapshot_every=every)
            return v
        raise UnknownTarget(slot.role)

    def _behavior(self, spec: dict):
        kind = spec.get("type", "rule")
        if kind == "rule":
            return RuleBehavior(spec.get("rules", []), spec.get("default", APPROVE))
        if kind == "llm":
            adapter = spec.get("adapter_obj") or load_adapter(spec.get("adapter", {"kind": "scripted", "rules": [], "default": REJECT}), self.clock)
            return LLMBehavior(adapter, spec.get("system_prompt", ""), spec.get("override_of"))
        if kind == "callable":
            return CallableBehavior(spec["fn"], spec.get("voter_type", "custom"))
        raise ValueError(f"unknown voter type {kind!r}")

    def _start(self, slot: Slot, first: bool = False) -> None:
        slot.client = self._session(slot)
        slot.component = self.build_component(slot, slot.client, self.snapshots)
        slot.incarnations += 1
        slot.state = "live"
        slot.restart_pending = False
        self.events.append(f"{'start' if first else 'restart'} {slot.name} @{self.bus.tail()}")
        self._stack.append(slot.name)
        try:
            c = slot.component
            if slot.role == "driver":
                driver_elect(c)
            elif slot.role == "executor":
                c.boot()
            elif slot.role == "voter" and first and slot.join_at:
                c.join_at_tail()
            else:
                recover_component(c)
        except Crash:
            self._mark_dead(slot)
        except Fenced:
            slot.state = "retired"
        finally:
            self._stack.pop()
        if not first and slot.state == "live" and self.on_restart is not None:
            self.on_restart(self, slot)

    def _mark_dead(self, slot: Slot, restart: Optional[bool] = None) -> None:
        slot.state = "dead"
        slot.component = None
        if restart is not None:
            slot.restart_pending = restart
        self.events.append(f"kill {slot.name} @{self.bus.tail()}")

    def slot(self, name: str) -> Slot:
        try:
            return self.slots[name]
        except KeyError:
            raise UnknownTarget(f"no component named {name!r}; have {sorted(self.slots)}") from None

    # -- fault hooks ------------------------------------------------------------------

    def _take_fault(self, pred) -> Optional[Fault]:
        for i, f in enumerate(self.faults):
            if pred(f):
                return self.faults.pop(i)
        return None

    def _before_append(self, slot: Slot, payload) -> None:
        k = slot.appends
        f = self._take_fault(lambda f: f.target == slot.name and f.at_append == k and f.when == "before")
        if f is not None:
            self._fire_in_append(slot, f)
        if len(self._stack) < 2 and self.scenario.interleave and self.rng.random() < self.scenario.interleave:
            others = [s for s in self.slots.values() if s.state == "live" and s.name not in self._stack]
            if others:
                self._run_step(self.rng.choice(others))

    def _after_append(self, slot: Slot, k: int) -> None:
        f = self._take_fault(lambda f: f.target == slot.name and f.at_append == k and f.when == "after")
        if f is not None:
            self._fire_in_append(slot, f)

    def _fire_in_append(self, slot: Slot, f: Fault) -> None:
        if f.kind == "kill":
            slot.restart_pending = f.restart
            raise Crash(f"{slot.name} killed at append {f.at_append} ({f.when})")
        if f.kind == "zombie":
            self._zombie(slot)
        else:
            self.apply_fault(f)

    def _zombie(self, slot: Slot) -> None:
        """Freeze the running driver mid-append while a successor takes over.

        The old instance finishes its append after the successor's election,
        so its entry lands right behind the election with a stale epoch.
        """
        if slot.role != "driver":
            raise UnknownTarget("zombie faults target the driver")
        zname = f"{slot.name}~zombie{slot.incarnations}"
        z = Slot(zname, slot.role, slot.spec, state="live", component=slot.component, client=slot.client,
                 incarnations=slot.incarnations)
        slot.client.slot = z
        self.slots[zname] = z
        self._start(slot)

    def _progress(self, intent_position: int, item: int) -> None:
        f = self._take_fault(lambda f: f.target == "executor" and f.at_item == item)
        if f is not None:
            self.slots["executor"].restart_pending = f.restart
            raise Crash(f"executor killed after item {item}")

    def _executed(self, intent_position: int, tail: int) -> None:
        self.executions.append((intent_position, tail))

    def apply_fault(self, f: Fault) -> None:
        slot = self.slot(f.target)
        if f.kind == "kill":
            if slot.state in ("live", "paused"):
                self._mark_dead(slot, f.restart)
        elif f.kind == "pause":
            if slot.state == "live":
                slot.state = "paused"
                self.events.append(f"pause {slot.name}")
        elif f.kind == "resume":
            if slot.state == "paused":
                slot.state = "live"
                self.events.append(f"resume {slot.name}")
        elif f.kind == "restart":
            if slot.state in ("live", "paused"):
                self._mark_dead(slot)
            self._start(slot)
        elif f.kind == "zombie":
            raise ValueError("zombie faults need an append trigger")

    inject_fault = apply_fault

    # -- scheduling -----------------------------------------------------------------------

    def _run_step(self, slot: Slot) -> bool:
        comp = slot.component
        self._stack.append(slot.name)
        try:
            return comp.step()
        except Crash:
            # a zombie fault may have moved the component to another slot mid-step
            self._mark_dead(comp.client.slot)
            return True
        except Fenced as exc:
            owner = comp.client.slot
            owner.state = "retired"
            owner.component = None
            self.events.append(f"retire {owner.name}: {exc}")
            return True
        finally:
            self._stack.pop()

    def _due_faults(self) -> bool:
        tail = self.bus.tail()
        f = self._take_fault(lambda f: f.at_entries is not None and tail >= f.at_entries)
        if f is None:
            return False
        self.apply_fault(f)
        return True

    def _inject(self, item: dict) -> None:
        kind = item.get("kind", "mail")
        if kind == "mail":
            pos = self.user.append(Mail(item.get("sender", "user"), item["body"]))
            self.attribution[pos] = "user"
        elif kind == "policy":
            doc = item["doc"]
            if isinstance(doc, (str, bytes)):
                payload = policy_payload(parse_policy(doc), "admin")
            else:
                payload = Policy(policy_kind(parse_policy(doc)), "admin", doc)
            pos = self.admin.append(payload)
            self.attribution[pos] = "admin"
        elif kind == "join_voter":
            self._add_slot(f"voter:{item['voter']['id']}", "voter", item["voter"], late=True)
        elif kind == "retire_voter":
            s = self.slot(f"voter:{item['id']}")
            s.state = "retired"
            s.component = None
        else:
            raise ValueError(f"unknown workload kind {kind!r}")
        self.events.append(f"inject {kind} @{self.bus.tail()}")

    def _due_workload(self, idle: bool) -> bool:
        if not self.workload:
            return False
        head = self.workload[0]
        at = head.get("at_entries")
        # an entry-count trigger is a deadline, not a wait: idle systems get it early
        if idle or (at is not None and self.bus.tail() >= at):
            self._inject(self.workload.pop(0))
            return True
        return False

    def _idle_action(self) -> bool:
        dead = [s for s in self.slots.values() if s.state == "dead" and s.restart_pending]
        if dead:
            for s in dead:
                self._start(s)
            return True
        if self._due_workload(idle=True):
            return True
        deadlines = [d for s in self.slots.values() if s.state == "live" and (d := s.component.next_deadline()) is not None]
        if deadlines and isinstance(self.clock, VirtualClock):
            target = min(deadlines)
            if target > self.clock.now_ms():
                self.clock.advance_to(target)
                return True
        paused = [s for s in self.slots.values() if s.state == "paused"]
        if paused:
            for s in paused:
                s.state = "live"
                self.events.append(f"auto-resume {s.name}")
            return True
        pending_faults = [f for f in self.faults if f.at_entries is not None]
        if pending_faults:
            # nothing else can move the log forward; fire the next one now
            self.apply_fault(self.faults.pop(self.faults.index(pending_faults[0])))
            return True
        if deadlines:
            # real clock: wait for the earliest deadline
            self.clock.sleep(max(0.0, (min(deadlines) - self.clock.now_ms()) / 1000))
            return True
        return False

    def run(self) -> "Simulation":
        limit = self.scenario.max_ticks
        while self.ticks < limit:
            self.ticks += 1
            if self._due_faults() or self._due_workload(idle=False):
                continue
            live = [s for s in self.slots.values() if s.state == "live"]
            if self.scenario.schedule == "random":
                self.rng.shuffle(live)
            progressed = False
            for s in live:
                if s.state == "live":
                    progressed |= self._run_step(s)
            if not progressed and not self._idle_action():
                break
        else:
            self.stalled = True
        return self

    # -- results ---------------------------------------------------------------------------

    def entries(self) -> list[Entry]:
        return self.auditor.read(0, self.auditor.tail())

    def evidence(self) -> LogEvidence:
        return LogEvidence(self.entries(), dict(self.attribution), list(self.executions))

    def live_components(self, role: str) -> list[Slot]:
        return [s for s in self.slots.values() if s.role == role and s.state == "live"]

    def fresh_replay(self, slot: Slot):
        """A new instance of the slot's component folded over the whole log, no snapshot."""
        comp = self.build_component(slot, self.bus.session(slot.client.identity), None)
        comp.catch_up()
        return comp

    def report(self, oracles=None) -> ScenarioReport:
        ev = self.evidence()
        violations = check_log(ev, INVARIANTS)
        results: dict[str, tuple[bool, str]] = {
            "invariants": (not violations, "; ".join(map(str, violations[:5])) or "ok"),
            "terminated": (not self.stalled, f"{self.ticks} ticks"),
        }
        from .scenarios import ORACLES  # registry of named checks

        for name in oracles if oracles is not None else self.scenario.oracles:
            fn = name if callable(name) else ORACLES[name]
            label = getattr(fn, "__name__", str(name)) if callable(name) else name
            try:
                results[label] = fn(self, ev)
            except Exception as exc:  # an oracle crashing is a failed oracle
                results[label] = (False, f"oracle raised {exc!r}")
        bytes_by_type = self.bus.payload_bytes_by_type()
        metrics = stage_metrics(ev.entries, bytes_by_type)
        return ScenarioReport(
            scenario=self.scenario.name,
            seed=self.seed,
            ok=all(ok for ok, _ in results.values()),
            oracles=results,
            violations=violations,
            metrics=metrics,
            entries=len(ev.entries),
            ticks=self.ticks,
            stalled=self.stalled,
            sandbox_hash=tree_hash(self.sandbox),
            bus_path=str(self.bus.path) if isinstance(self.bus, DurableBus) else None,
        )

    def close(self, keep: bool = False) -> None:
        self.bus.close()
        if self._own_dir and not keep:
            shutil.rmtree(self.workdir, ignore_errors=True)


def run_scenario(scenario, seed: int = 0, workdir=None, keep: bool = False, strict: bool = False, oracles=None) -> ScenarioReport:
    sim = Simulation(scenario, seed, workdir)
    try:
        sim.run()
        report = sim.report(oracles)
    finally:
        sim.close(keep=keep or workdir is not None)
    return report.raise_for_failure() if strict else report
