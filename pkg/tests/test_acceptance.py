"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line.

Run just these with ``pytest tests/test_acceptance.py -v -s`` or through
``scripts/run_acceptance.sh``.
"""

import collections
import struct
import time

import pytest

from logact import MemoryBus, VirtualClock, role_identity
from logact.components import Driver, Fenced, RuleBehavior, Voter, driver_elect
from logact.components import Decider, Executor
from logact.durable import MAGIC
from logact.entries import TYPE_TAGS, Abort, ActionSpec, Commit, InfIn, Intent, Mail, PayloadType, Result, Vote
from logact.harness import Simulation, check_log, crash_point_sweep, random_scenario, run_scenario, stage_metrics
from logact.harness.equivalence import compare_backends, kill_trials
from logact.harness.oracle import LogEvidence
from logact.harness.scenarios import INTROSPECTION_LINE, delta_overhead, executor_kill, hello_task, hot_swap, hot_swap_phases
from logact.inference import ScriptedAdapter, ScriptedRule, action_block
from logact.policies import FirstVoter, policy_payload

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(request, capsys):
    """Print ``PASS``/``FAIL`` for the criterion, then fail the test if needed."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        assert ok, line

    return record


# -- 1: randomized safety --------------------------------------------------------------


def _slot_nine_slot_ten(tmp_path):
    """Election for epoch 2 at position 9, the deposed driver's intent at 10."""
    clock = VirtualClock()
    bus = MemoryBus(clock)
    for r in ("admin", "user", "driver", "decider", "executor"):
        bus.register(role_identity(r))
    bus.register(role_identity("voter", "v0"))
    admin = bus.session(role_identity("admin"))
    admin.append(policy_payload(FirstVoter(), "admin"))
    hello = ScriptedAdapter([ScriptedRule("say hello", action_block(ActionSpec("shell", "echo hi"))),
                             ScriptedRule("hi", "TASK COMPLETE")])
    sandbox = tmp_path / "slot10"
    sandbox.mkdir()
    a = Driver(bus.session(role_identity("driver")), hello, candidate_id="A", clock=clock)
    voter = Voter(bus.session(role_identity("voter", "v0")), RuleBehavior(), "v0")
    decider = Decider(bus.session(role_identity("decider")), clock=clock)
    executor = Executor(bus.session(role_identity("executor")), sandbox)
    driver_elect(a)
    executor.boot()
    while admin.tail() < 9:
        admin.append(Mail("user", "padding"))
    b = Driver(bus.session(role_identity("driver")), hello, candidate_id="B", clock=clock)
    b.catch_up()
    b.elect()
    stale = a.client.append(Intent(ActionSpec("shell", "touch stale"), a.epoch, 1))
    for _ in range(50):
        if not any(c.step() for c in (b, voter, decider, executor)):
            break
    es = admin.read(0, admin.tail())
    reacted = [e.position for e in es if isinstance(e.payload, (Vote, Commit, Abort)) and e.payload.intent_position == stale]
    try:
        a.step()
        fenced = False
    except Fenced:
        fenced = True
    writer = {Mail: "admin", Vote: "voter", Commit: "decider", Abort: "decider", Result: "executor"}
    attribution = {e.position: "admin" if e.position == 0 else writer.get(type(e.payload), "driver") for e in es}
    violations = check_log(LogEvidence(es, attribution))
    clean = not violations
    ok = b.election_position == 9 and stale == 10 and not reacted and fenced and clean and not (sandbox / "stale").exists()
    return ok, f"election@{b.election_position} stale intent@{stale} reactions={reacted} deposed driver fenced={fenced} violations={[v.invariant for v in violations]}"


def test_criterion_1_randomized_safety(tmp_path, verdict):
    t0 = time.monotonic()
    failures, faults, invariant_hits = [], collections.Counter(), collections.Counter()
    for seed in range(1000):
        sc = random_scenario(seed)
        for f in sc.faults:
            faults[f.kind] += 1
        r = run_scenario(sc, seed)
        if not r.ok:
            failures.append((seed, [k for k, (ok, _) in r.oracles.items() if not ok]))
        for v in r.violations:
            invariant_hits[v.invariant] += 1
    elapsed = time.monotonic() - t0
    slot_ok, slot_detail = _slot_nine_slot_ten(tmp_path)
    ok = not failures and not invariant_hits and elapsed < 300 and slot_ok
    verdict(1, ok, f"1000 randomized runs in {elapsed:.1f}s, {len(failures)} failing {failures[:3]}, invariant hits {dict(invariant_hits)}, "
                   f"faults injected {dict(faults)}; slot 9/10: {slot_detail}")


# -- 2: crash-point sweeps -------------------------------------------------------------


def test_criterion_2_crash_point_sweeps(verdict):
    t0 = time.monotonic()
    reports = [crash_point_sweep(hello_task(), c) for c in ("driver", "decider", "voter:rule", "executor")]
    elapsed = time.monotonic() - t0
    runs = sum(len(r.runs) for r in reports)
    ok = all(r.ok and r.runs for r in reports) and elapsed < 600
    verdict(2, ok, f"{runs} crash runs in {elapsed:.1f}s; " + "; ".join(r.summary() for r in reports))


# -- 3: hot swap -----------------------------------------------------------------------


def test_criterion_3_hot_swap(verdict):
    sim = Simulation(hot_swap(), 0)
    try:
        sim.run()
        rep = sim.report()
        p1, p2, p3 = hot_swap_phases(sim.evidence())
    finally:
        sim.close()
    ok = (
        rep.ok
        and p1["attack"] > 0 and p1["attack_commit"] == p1["attack"]
        and p2["attack"] > 0 and p2["attack_abort"] == p2["attack"]
        and p2["benign_commit_rate"] < p1["benign_commit_rate"]
        and p3["attack"] > 0 and p3["attack_abort"] == p3["attack"]
        and p3["benign_commit_rate"] >= p1["benign_commit_rate"] - 0.05
    )
    fmt = lambda p: f"{p['policy']} attacks {p['attack_commit']}c/{p['attack_abort']}a of {p['attack']}, benign commit {p['benign_commit_rate']:.2f}"  # noqa: E731
    verdict(3, ok, " | ".join(fmt(p) for p in (p1, p2, p3)))


# -- 4: recovery without rework ---------------------------------------------------------


class _RecordingSim(Simulation):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.progress, self.counters_at_kill = [], None

    def _progress(self, intent_position, item):
        self.progress.append((intent_position, item))
        if item == 20 and self.counters_at_kill is None:
            d = self.sandbox / "counters"
            self.counters_at_kill = {p.name: p.read_text() for p in d.iterdir()}
        super()._progress(intent_position, item)


def test_criterion_4_recovery(verdict):
    sim = _RecordingSim(executor_kill(n_items=50, kill_after=20), 0)
    try:
        sim.run()
        rep = sim.report()
        es = sim.entries()
        final = {p.name: p.read_text() for p in (sim.sandbox / "counters").iterdir()}
        names = sorted(final)
    finally:
        sim.close()
    recovery = next(e.position for e in es if isinstance(e.payload, Result) and e.payload.status == "recovery" and e.position > 2)
    after = [e for e in es if isinstance(e.payload, Intent) and e.position > recovery]
    bodies = [e.payload.action.body for e in after]
    first_work = next(i for i, b in enumerate(bodies) if b.startswith("process_items"))
    introspect = [i for i, b in enumerate(bodies) if not b.startswith("process_items")]
    post_items = [item for pos, item in sim.progress if pos > recovery]
    before = sorted(sim.counters_at_kill or {})
    said = any(INTROSPECTION_LINE in getattr(e.payload, "text", "") for e in es if e.position > recovery)
    ok = (
        rep.ok
        and before == names[:20] and all(v == "x" for v in sim.counters_at_kill.values())
        and len(names) == 50 and all(v == "x" for v in final.values())
        and post_items == list(range(21, 51))
        and introspect and max(introspect) < first_work and said
    )
    verdict(4, ok, f"counters at kill {len(before)}, after recovery items {post_items[:1]}..{post_items[-1:]} "
                   f"({len(post_items)} items), every counter exactly once: {all(v == 'x' for v in final.values())}; "
                   f"intents after recovery: {bodies}")


# -- 5: delta encoding and inference share --------------------------------------------


def _file_records(path):
    """(type tag, payload bytes) for every record, parsed straight from the file."""
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    off, out = len(MAGIC), []
    while off < len(data):
        n, _crc = struct.unpack_from(">II", data, off)
        _pos, _ts, tag = struct.unpack_from(">QQB", data, off + 8)
        out.append((tag, data[off + 25: off + 25 + n]))
        off += 25 + n
    return data, out


def test_criterion_5_delta_overhead(tmp_path, verdict):
    sc = delta_overhead(turns=10, delay_s=1.0, backend="durable")
    prompt = sc.system_prompt.encode()
    assert len(prompt) == 70 * 1024
    sim = Simulation(sc, 0, workdir=tmp_path)
    try:
        sim.run()
        rep = sim.report()
        m = stage_metrics(sim.entries())
        path = sim.bus.path
    finally:
        sim.close()
    blob, records = _file_records(path)
    infin = [d for tag, d in records if tag == TYPE_TAGS[PayloadType.INF_IN]]
    deltas = [len(d) - d.count(prompt) * len(prompt) for d in infin]
    total, bound = sum(len(d) for d in infin), len(prompt) + 10 * max(deltas)
    occurrences = blob.count(prompt)
    ratio = m.inferring_ms / max(1, m.voting_ms + m.deciding_ms)
    ok = rep.ok and len(infin) == 10 and total <= bound and occurrences == 1 and m.inferring_ms >= 5 * (m.voting_ms + m.deciding_ms)
    verdict(5, ok, f"{len(infin)} turns, InfIn bytes {total} <= {bound}, prompt stored {occurrences}x; "
                   f"inferring {m.inferring_ms} ms vs voting+deciding {m.voting_ms + m.deciding_ms} ms (x{ratio:.0f})")


# -- 6: backend equivalence and durability ----------------------------------------------


def test_criterion_6_backend_equivalence(tmp_path, verdict):
    eq = compare_backends(10_000, seed=0, workdir=tmp_path)
    kills = kill_trials(200, seed=0, workdir=tmp_path)
    ok = eq.ok and eq.sequences >= 10_000 and kills.ok and kills.trials == 200
    verdict(6, ok, f"{eq.sequences} sequences / {eq.operations} ops, {len(eq.mismatches)} mismatches {eq.mismatches[:1]} "
                   f"({eq.seconds:.0f}s); {kills.trials} SIGKILL trials, {kills.acknowledged} acked appends, "
                   f"{len(kills.lost)} lost, {len(kills.wrong)} altered ({kills.seconds:.0f}s)")
