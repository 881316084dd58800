import random

import pytest

from logact.durable import DurableBus
from logact.harness.equivalence import compare_backends, compare_sequence, kill_trials, random_ops


def test_small_equivalence_run():
    rep = compare_backends(200, seed=9)
    assert rep.ok, rep.mismatches[:3]
    assert rep.operations > 1000


def test_differ_catches_a_lossy_backend(tmp_path, monkeypatch):
    orig = DurableBus.read

    def read(self, client, start, end):
        return orig(self, client, start, end)[:-1]

    monkeypatch.setattr(DurableBus, "read", read)
    found = None
    for k in range(50):
        rng = random.Random(k)
        found = compare_sequence(random_ops(rng, 40), tmp_path / f"{k}.log")
        if found:
            break
    assert found and found["op"][0] in ("read", "final")


def test_differ_catches_forgotten_state_on_reopen(tmp_path, monkeypatch):
    monkeypatch.setattr(DurableBus, "_reload_identities", lambda self: None)
    rng = random.Random(3)
    hits = [compare_sequence(random_ops(rng, 40), tmp_path / f"{k}.log") for k in range(60)]
    assert any(h and h["op"][0] != "final" for h in hits)


@pytest.mark.parametrize("seed", [0, 1])
def test_kill_trials_small(tmp_path, seed):
    rep = kill_trials(10, seed=seed, workdir=tmp_path)
    assert rep.acknowledged >= 10
    assert rep.ok, (rep.lost, rep.wrong)
