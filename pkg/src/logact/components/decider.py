"""The decider: folds votes through the quorum policy into Commit or Abort."""

from __future__ import annotations

import logging
from typing import Optional

from ..entries import Abort, Commit, Entry, Intent, PayloadType, Policy, Vote, payload_body
from ..policies import (
    ABORT,
    COMMIT,
    UNDECIDED,
    MalformedPolicy,
    OnByDefault,
    evaluate,
    parse_policy,
    payload_policy,
    policy_document,
)
from .base import Component, EpochTracker

log = logging.getLogger(__name__)

DEFAULT_VOTE_TIMEOUT_S = 30.0


class Decider(Component):
    role = "decider"
    wait_types = frozenset({PayloadType.INTENT, PayloadType.VOTE, PayloadType.POLICY})

    def __init__(
        self,
        client,
        component_id: str = "decider",
        default_policy=None,
        timeout_s: float = DEFAULT_VOTE_TIMEOUT_S,
        snapshots=None,
        snapshot_every: int = 0,
        clock=None,
    ):
        super().__init__(client, component_id, snapshots, snapshot_every)
        self.default_policy = default_policy or OnByDefault()
        self.timeout_ms = int(timeout_s * 1000)
        self.clock = clock or client.bus.clock
        self._reset()

    def _reset(self) -> None:
        self.policy_doc: dict = policy_document(self.default_policy)
        self.epochs = EpochTracker()
        # intent position -> {"policy": doc, "votes": [Vote], "ts": ms}
        self.pending: dict[int, dict] = {}
        self.decided: set[int] = set()

    def play(self, entry: Entry) -> None:
        p = entry.payload
        pos = entry.position
        if isinstance(p, Policy):
            if self.epochs.observe(entry) is not None or p.kind != "decider":
                return
            try:
                payload_policy(p)
            except MalformedPolicy as exc:
                log.warning("ignoring malformed decider policy at %d: %s", pos, exc)
                return
            self.policy_doc = p.body
        elif isinstance(p, Intent):
            if pos in self.decided or not self.epochs.valid(p.driver_epoch):
                return
            if self.pending:
                log.error("intent %d arrived while %s undecided", pos, sorted(self.pending))
            self.pending[pos] = {"policy": self.policy_doc, "votes": [], "ts": entry.realtime_ts}
        elif isinstance(p, Vote):
            rec = self.pending.get(p.intent_position)
            if rec is not None:
                rec["votes"].append(p)
        elif isinstance(p, (Commit, Abort)):
            self.decided.add(p.intent_position)
            self.pending.pop(p.intent_position, None)

    def decision(self, pos: int) -> str:
        rec = self.pending[pos]
        return evaluate(parse_policy(rec["policy"]), rec["votes"])

    def act(self) -> bool:
        acted = False
        now = self.clock.now_ms()
        for pos in sorted(self.pending):
            rec = self.pending.get(pos)
            if rec is None:
                continue
            verdict = evaluate(parse_policy(rec["policy"]), rec["votes"])
            if verdict == COMMIT:
                self.client.append(Commit(pos))
            elif verdict == ABORT:
                self.client.append(Abort(pos, f"quorum rejected under {rec['policy'].get('expr')}"))
            elif now - rec["ts"] >= self.timeout_ms:
                self.client.append(Abort(pos, "timeout"))
            else:
                continue
            acted = True
            self.catch_up()
        return acted

    def next_deadline(self) -> Optional[int]:
        waiting = [r["ts"] + self.timeout_ms for r in self.pending.values()]
        return min(waiting) if waiting else None

    def state_dict(self) -> dict:
        return {
            "policy": self.policy_doc,
            "elections": self.epochs.to_list(),
            "pending": {
                str(p): {"policy": r["policy"], "votes": [payload_body(v) for v in r["votes"]], "ts": r["ts"]}
                for p, r in sorted(self.pending.items())
            },
            "decided": sorted(self.decided),
            "played_up_to": self.played_up_to,
        }

    def load_state(self, state: dict) -> None:
        self._reset()
        self.policy_doc = state["policy"]
        self.epochs = EpochTracker.from_list(state["elections"])
        self.pending = {
            int(p): {
                "policy": r["policy"],
                "votes": [Vote(v["intent_position"], v["voter_type"], v["voter_id"], v["verdict"], v["rationale"]) for v in r["votes"]],
                "ts": r["ts"],
            }
            for p, r in state["pending"].items()
        }
        self.decided = set(state["decided"])
