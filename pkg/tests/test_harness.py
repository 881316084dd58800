"""Scenario runner, invariant oracle and the mutants it must catch."""

import dataclasses

import pytest
import yaml

from logact import entries as E
from logact.components import decider as decider_mod
from logact.components import driver as driver_mod
from logact.components import executor as executor_mod
from logact.components import voter as voter_mod
from logact.components.base import EpochTracker
from logact.entries import (
    ActionSpec,
    Commit,
    Entry,
    InfIn,
    InfOut,
    Intent,
    Mail,
    Message,
    Policy,
    Result,
    Vote,
)
from logact.harness import (
    Fault,
    LogEvidence,
    Scenario,
    Simulation,
    UnknownTarget,
    check_log,
    crash_point_sweep,
    load_scenario,
    run_scenario,
    stage_metrics,
)
from logact.harness.scenarios import ON_BY_DEFAULT, executor_kill, hello_task, hot_swap, hot_swap_phases, plan_mail, random_scenario
from logact.inference import action_block


# -- the oracle on hand-built logs -------------------------------------------------------

ELECT = lambda n: Policy("driver_election", "d", {"kind": "driver_election", "candidate": f"d{n}", "epoch": n})  # noqa: E731
A = ActionSpec("shell", "true")


def _log(*payloads, roles=None):
    es = [Entry(i, 1000 + i, p) for i, p in enumerate(payloads)]
    default = {
        Policy: "driver", Mail: "user", InfIn: "driver", InfOut: "driver", Intent: "driver",
        Vote: "voter", Commit: "decider", E.Abort: "decider", Result: "executor",
    }
    attribution = {e.position: default[type(e.payload)] for e in es}
    attribution.update(roles or {})
    return es, attribution


def _proposal(epoch=1):
    return InfOut(action_block(A), True, epoch)


def _names(violations):
    return sorted({v.invariant for v in violations})


def test_clean_log_has_no_violations():
    es, attr = _log(ELECT(1), Mail("u", "go"), InfIn((Message("user", "go"),), 1), _proposal(), Intent(A, 1, 1),
                    Vote(4, "rule", "r", "approve"), Commit(4), Result(4, "ok", "done"))
    assert check_log(LogEvidence(es, attr, [(4, 7)])) == []


def test_detects_execute_before_commit():
    es, attr = _log(ELECT(1), _proposal(), Intent(A, 1, 1), Result(2, "ok"), Commit(2))
    assert _names(check_log(LogEvidence(es, attr))) == ["commit_before_execute"]


def test_detects_two_in_flight():
    es, attr = _log(ELECT(1), _proposal(), Intent(A, 1, 1), _proposal(), Intent(A, 1, 2))
    assert _names(check_log(LogEvidence(es, attr))) == ["single_in_flight"]


def test_detects_slot_ten_vote():
    # election for epoch 2 at slot 3; the epoch-1 intent at slot 4 is stale
    es, attr = _log(ELECT(1), _proposal(), Mail("u", "x"), ELECT(2), Intent(A, 1, 1), Vote(4, "rule", "r", "approve"))
    names = _names(check_log(LogEvidence(es, attr)))
    assert names == ["fencing"]


def test_detects_intent_without_proposal():
    es, attr = _log(ELECT(1), Intent(A, 1, 1))
    assert _names(check_log(LogEvidence(es, attr), ["fencing"])) == ["fencing"]


def test_detects_duplicate_execution():
    es, attr = _log(ELECT(1), _proposal(), Intent(A, 1, 1), Commit(2), Commit(2), Result(2, "ok"))
    assert _names(check_log(LogEvidence(es, attr, [(2, 4), (2, 5)]))) == ["no_duplicate_execution"]


def test_detects_executor_control_append():
    es, attr = _log(ELECT(1), _proposal(), Intent(A, 1, 1), Commit(2), roles={3: "executor"})
    assert _names(check_log(LogEvidence(es, attr))) == ["acl"]


def test_detects_commit_against_quorum():
    doc = {"kind": "decider", "expr": "first_voter"}
    es, attr = _log(Policy("decider", "a", doc), ELECT(1), _proposal(), Intent(A, 1, 1),
                    Vote(3, "rule", "r", "reject"), Commit(3), roles={0: "admin"})
    assert _names(check_log(LogEvidence(es, attr))) == ["enforced_safety"]


# -- built-in scenarios ------------------------------------------------------------------


def test_hello_task_passes():
    r = run_scenario(hello_task(), 0, strict=True)
    assert r.ok and r.sandbox_hash


def test_executor_kill_recovers_without_rework():
    r = run_scenario(executor_kill(n_items=12, kill_after=5), 0)
    assert r.ok, r.oracles


def test_hot_swap_small_corpus():
    sim = Simulation(hot_swap(n_per_phase=20), 0)
    try:
        sim.run()
        phases = hot_swap_phases(sim.evidence())
    finally:
        sim.close()
    assert phases[0]["attack_commit"] == phases[0]["attack"] > 0
    for p in phases[1:]:
        assert p["attack_abort"] == p["attack"] > 0
    assert phases[1]["benign_commit_rate"] < phases[0]["benign_commit_rate"]
    assert phases[2]["benign_commit_rate"] >= phases[0]["benign_commit_rate"] - 0.05


def test_same_seed_same_bytes(tmp_path):
    sc = hello_task(backend="durable", faults=[Fault("decider", "kill", at_append=1)])
    a = run_scenario(sc, 3, workdir=tmp_path / "a")
    b = run_scenario(sc, 3, workdir=tmp_path / "b")
    assert a.ok and b.ok
    assert (tmp_path / "a" / "bus.log").read_bytes() == (tmp_path / "b" / "bus.log").read_bytes()
    assert a.sandbox_hash == b.sandbox_hash


@pytest.mark.parametrize("seed", [5, 17])
def test_random_scenarios_are_reproducible(seed):
    a, b = Simulation(random_scenario(seed), seed), Simulation(random_scenario(seed), seed)
    try:
        a.run()
        b.run()
        assert [x.payload for x in a.entries()] == [x.payload for x in b.entries()]
        assert a.events == b.events
    finally:
        a.close()
        b.close()


def test_scenario_from_yaml(tmp_path):
    doc = {
        "name": "yaml-hello",
        "voters": [{"id": "rule", "type": "rule", "rules": [{"pattern": "*attacker*", "verdict": "reject"}]}],
        "decider_policy": {"kind": "decider", "expr": "first_voter"},
        "workload": [{"kind": "mail", "body": plan_mail("y", ["echo one", "write_file a.txt hi"])}],
        "faults": [{"target": "voter:rule", "kind": "kill", "at": {"append": 0, "when": "after"}}],
        "schedule": "fixed",
    }
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(doc))
    sc = load_scenario(str(path))
    assert sc.faults == [Fault("voter:rule", "kill", at_append=0, when="after")]
    r = run_scenario(sc, 0)
    assert r.ok, r.oracles
    with pytest.raises(ValueError):
        Scenario.from_dict({**doc, "colour": "blue"})


def test_unknown_fault_target():
    with pytest.raises(UnknownTarget):
        run_scenario(hello_task(faults=[Fault("voter:nobody", "kill", at_entries=3)]), 0)
    with pytest.raises(ValueError):
        Fault("driver", "explode")


def test_stage_metrics_spans():
    es = [
        Entry(0, 0, InfIn((), 1)), Entry(1, 100, _proposal()), Entry(2, 110, Intent(A, 1, 1)),
        Entry(3, 130, Vote(2, "rule", "r", "approve")), Entry(4, 135, Commit(2)), Entry(5, 175, Result(2, "ok")),
    ]
    m = stage_metrics(es)
    assert (m.inferring_ms, m.voting_ms, m.deciding_ms, m.executing_ms) == (100, 20, 5, 40)
    assert m.to_csv().splitlines()[0] == "stage,start_position,end_position,duration_ms"
    assert m.to_csv().splitlines()[1] == "inferring,0,1,100"


def test_decider_sweep_is_clean():
    rep = crash_point_sweep(hello_task(), "decider")
    assert rep.boundaries == 3 and len(rep.runs) == 6
    assert rep.ok, rep.summary()


# -- mutants: each breaks one guarantee and must be reported ----------------------------


class _Blind(EpochTracker):
    def valid(self, epoch):
        return True


def _failures(sc, patches, setitems=()):
    mp = pytest.MonkeyPatch()
    try:
        for obj, name, value in patches:
            mp.setattr(obj, name, value)
        for d, k, v in setitems:
            mp.setitem(d, k, v)
        r = run_scenario(sc, 0)
    finally:
        mp.undo()
    return {k: d for k, (ok, d) in r.oracles.items() if not ok}


def test_mutant_without_fencing_is_caught():
    sc = hello_task(faults=[Fault("driver", "zombie", at_append=3)])
    assert not _failures(sc, [])
    bad = _failures(sc, [(m, "EpochTracker", _Blind) for m in (voter_mod, decider_mod, executor_mod)])
    assert "fencing" in bad["invariants"]


def test_mutant_without_recovery_fence_is_caught():
    orig = executor_mod.Executor.play

    def play(self, entry):
        if isinstance(entry.payload, Result) and entry.payload.status == "recovery":
            self.fence = entry.position
            return
        orig(self, entry)

    sc = hello_task(faults=[Fault("executor", "kill", at_append=1, when="before")])
    assert not _failures(sc, [])
    assert "no_duplicate_execution" in _failures(sc, [(executor_mod.Executor, "play", play)])["invariants"]


def test_mutant_executing_uncommitted_is_caught():
    orig = executor_mod.Executor.play

    def play(self, entry):
        orig(self, entry)
        if isinstance(entry.payload, Intent):
            self.committed.add(entry.position)

    assert "commit_before_execute" in _failures(hello_task(), [(executor_mod.Executor, "play", play)])["invariants"]


def test_mutant_rubber_stamp_decider_is_caught():
    bad = _failures(hot_swap(n_per_phase=10), [(decider_mod, "evaluate", lambda policy, votes: "commit")])
    assert "enforced_safety" in bad["invariants"]
    assert "hot_swap_phases" in bad


def test_mutant_loose_acl_is_caught():
    loose = dataclasses.replace(E.ROLE_PERMISSIONS["executor"], appendable=E.ALL_TYPES)
    sc = hello_task(voters=[], decider_policy=dict(ON_BY_DEFAULT),
                    workload=[{"kind": "mail", "body": plan_mail("f", ["forge vote", "forge commit"])}],
                    oracles=["task_complete", "forge_denied"])
    assert not _failures(sc, [])
    bad = _failures(sc, [], [(E.ROLE_PERMISSIONS, "executor", loose)])
    assert "executor appended Vote" in bad["invariants"]
    assert "forge_denied" in bad


def test_mutant_impatient_driver_is_caught():
    orig = driver_mod.Driver.play

    def play(self, entry):
        orig(self, entry)
        if isinstance(entry.payload, Intent):
            self.pending_intent = None

    work = [{"kind": "mail", "body": plan_mail("a", ["echo a1", "echo a2"])},
            {"kind": "mail", "body": plan_mail("b", ["echo b1"]), "at_entries": 7}]
    sc = hello_task(workload=work, voters=[{"id": "rule", "type": "rule", "rules": []}], oracles=["task_complete"])
    assert not _failures(sc, [])
    assert "single_in_flight" in _failures(sc, [(driver_mod.Driver, "play", play)])["invariants"]
