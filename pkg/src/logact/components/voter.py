"""Voters and their pluggable behaviors.

A behavior is consulted once per intent with the action, the proposing
inference output, the votes already seen for that intent, and the voter
configuration in force at the intent's log position.  It answers
``(verdict, rationale)`` or ``None`` when it is not ready to vote yet.
"""

from __future__ import annotations

import copy
import fnmatch
import logging
import re
from typing import Any, Callable, Optional

from ..entries import (
    APPROVE,
    REJECT,
    ActionSpec,
    Entry,
    InfOut,
    Intent,
    Message,
    PayloadType,
    Policy,
    Vote,
    canonical_json,
    decode_payload,
    payload_body,
)
from ..policies import MalformedPolicy, VoterPolicy, payload_policy
from .base import Component, EpochTracker

log = logging.getLogger(__name__)

VoteAnswer = Optional[tuple[str, str]]


def rule_matches(rule: dict, action: ActionSpec) -> bool:
    subject = action.workdir if rule.get("scope", "body") == "workdir" else action.body
    pattern = rule["pattern"]
    if rule.get("match", "glob") == "regex":
        return re.search(pattern, subject) is not None
    return fnmatch.fnmatchcase(subject, pattern)


class RuleBehavior:
    """Ordered allow/deny rules; first match wins.

    Rule documents: ``{pattern, match: glob|regex, verdict, scope: body|workdir}``.
    Voter policy bodies may carry ``prepend_rules``, ``append_rules``,
    ``replace_rules`` and ``default``.
    """

    voter_type = "rule"

    def __init__(self, rules: Optional[list[dict]] = None, default: str = APPROVE):
        for r in rules or []:
            _check_rule(r)
        self.rules = list(rules or [])
        self.default = default

    def initial_config(self) -> dict:
        return {"rules": copy.deepcopy(self.rules), "default": self.default}

    def apply_policy(self, config: dict, body: dict) -> dict:
        new = copy.deepcopy(config)
        if "replace_rules" in body:
            new["rules"] = list(body["replace_rules"])
        new["rules"] = list(body.get("prepend_rules", [])) + new["rules"] + list(body.get("append_rules", []))
        if "default" in body:
            new["default"] = body["default"]
        for r in new["rules"]:
            _check_rule(r)
        return new

    def vote(self, action: ActionSpec, context: str, votes: list[Vote], config: dict) -> VoteAnswer:
        for i, rule in enumerate(config["rules"]):
            if rule_matches(rule, action):
                return rule["verdict"], f"rule {i} ({rule['pattern']!r}) -> {rule['verdict']}"
        return config["default"], "no rule matched; default"


def _check_rule(rule: dict) -> None:
    if not isinstance(rule, dict) or "pattern" not in rule or rule.get("verdict") not in (APPROVE, REJECT):
        raise MalformedPolicy(f"bad voter rule {rule!r}")
    if rule.get("match", "glob") == "regex":
        re.compile(rule["pattern"])


class LLMBehavior:
    """Votes by asking an inference adapter.

    With ``override_of`` set, it waits for that voter type's vote, approves
    what that voter approved without an inference call, and otherwise asks
    the model whether to overturn the rejection.
    """

    voter_type = "llm"

    def __init__(self, adapter, system_prompt: str = "", override_of: Optional[str] = None):
        self.adapter = adapter
        self.system_prompt = system_prompt
        self.override_of = override_of

    def initial_config(self) -> dict:
        return {"instructions": []}

    def apply_policy(self, config: dict, body: dict) -> dict:
        new = copy.deepcopy(config)
        if "instruction" in body:
            new["instructions"].append(str(body["instruction"]))
        if "instructions" in body:
            new["instructions"] = [str(i) for i in body["instructions"]]
        return new

    def vote(self, action: ActionSpec, context: str, votes: list[Vote], config: dict) -> VoteAnswer:
        prior = None
        if self.override_of is not None:
            prior = next((v for v in votes if v.voter_type == self.override_of), None)
            if prior is None:
                return None
            if prior.verdict == APPROVE:
                return APPROVE, f"{self.override_of} voter approved"
        system = "\n".join([self.system_prompt, *config["instructions"]]).strip()
        lines = [
            f"Proposed action ({action.kind}, workdir {action.workdir}):",
            action.body,
            f"Agent reasoning: {context}" if context else "",
        ]
        if prior is not None:
            lines.append(f"The {prior.voter_type} voter rejected it: {prior.rationale}")
        lines.append("Answer APPROVE or REJECT.")
        convo = [Message("system", system)] if system else []
        convo.append(Message("user", "\n".join(l for l in lines if l)))
        answer = self.adapter.infer(convo)
        verdict = _parse_verdict(answer)
        return verdict, answer.strip()[:500]


def _parse_verdict(answer: str) -> str:
    up = answer.upper()
    a, r = up.find("APPROVE"), up.find("REJECT")
    if a >= 0 and (r < 0 or a < r):
        return APPROVE
    return REJECT  # unclear answers fail closed


class CallableBehavior:
    """Wraps a plain function ``fn(action, context, votes) -> (verdict, rationale) | None``."""

    def __init__(self, fn: Callable[..., VoteAnswer], voter_type: str = "custom"):
        self.fn = fn
        self.voter_type = voter_type

    def initial_config(self) -> dict:
        return {}

    def apply_policy(self, config: dict, body: dict) -> dict:
        return {**config, **body}

    def vote(self, action, context, votes, config):
        return self.fn(action, context, votes)


class Voter(Component):
    role = "voter"
    wait_types = frozenset({PayloadType.INTENT, PayloadType.VOTE, PayloadType.POLICY})

    def __init__(
        self,
        client,
        behavior,
        voter_id: str,
        voter_type: Optional[str] = None,
        join_at: int = 0,
        snapshots=None,
        snapshot_every: int = 0,
    ):
        super().__init__(client, voter_id, snapshots, snapshot_every)
        self.behavior = behavior
        self.voter_id = voter_id
        self.voter_type = voter_type or behavior.voter_type
        self.join_at = join_at
        self._reset()

    def _reset(self) -> None:
        self.epochs = EpochTracker()
        self.configs: list[Any] = [self.behavior.initial_config()]
        self.pending: dict[int, dict] = {}
        self.voted: set[int] = set()
        self.seen_votes: dict[int, list[Vote]] = {}
        self.last_context = ""

    def join_at_tail(self) -> None:
        """Start from the current tail: earlier intents are never voted on.

        Only policy entries before the join point are folded, so the voter
        knows the live epoch and its own configuration.
        """
        self.join_at = self.client.tail()
        for e in self.client.poll(0, {PayloadType.POLICY}, 0.0):
            if e.position < self.join_at:
                self.play(e)
        self.played_up_to = self.join_at
        if self.snapshots is not None:
            self.snapshot()

    def play(self, entry: Entry) -> None:
        p = entry.payload
        pos = entry.position
        if pos < self.join_at and not isinstance(p, Policy):
            return
        if isinstance(p, Policy):
            if self.epochs.observe(entry) is not None or p.kind != "voter":
                return
            try:
                pol = payload_policy(p)
            except MalformedPolicy as exc:
                log.warning("%s: ignoring malformed policy at %d: %s", self.voter_id, pos, exc)
                return
            assert isinstance(pol, VoterPolicy)
            if pol.target_voter_type == self.voter_type:
                try:
                    self.configs.append(self.behavior.apply_policy(self.configs[-1], pol.body))
                except (MalformedPolicy, KeyError, TypeError, ValueError, re.error) as exc:
                    log.warning("%s: voter policy at %d rejected: %s", self.voter_id, pos, exc)
        elif isinstance(p, InfOut):
            self.last_context = p.text
        elif isinstance(p, Intent):
            if pos in self.voted or not self.epochs.valid(p.driver_epoch):
                return
            self.pending[pos] = {"intent": p, "config": len(self.configs) - 1, "context": self.last_context}
        elif isinstance(p, Vote):
            self.seen_votes.setdefault(p.intent_position, []).append(p)
            if p.voter_id == self.voter_id:
                self.voted.add(p.intent_position)
                self.pending.pop(p.intent_position, None)

    def act(self) -> bool:
        acted = False
        for pos in sorted(self.pending):
            rec = self.pending.get(pos)
            if rec is None:
                continue
            intent: Intent = rec["intent"]
            try:
                answer = self.behavior.vote(intent.action, rec["context"], self.seen_votes.get(pos, []), self.configs[rec["config"]])
            except Exception as exc:
                log.warning("%s: behavior failed on intent %d: %s", self.voter_id, pos, exc)
                answer = (REJECT, f"voter error (fail closed): {exc}")
            if answer is None:
                continue
            verdict, rationale = answer
            self.client.append(Vote(pos, self.voter_type, self.voter_id, verdict, rationale))
            acted = True
            self.catch_up()
        return acted

    def state_dict(self) -> dict:
        return {
            "voter_id": self.voter_id,
            "voter_type": self.voter_type,
            "join_at": self.join_at,
            "elections": self.epochs.to_list(),
            "configs": self.configs,
            "pending": {
                str(p): {"intent": payload_body(r["intent"]), "config": r["config"], "context": r["context"]}
                for p, r in sorted(self.pending.items())
            },
            "voted": sorted(self.voted),
            "seen_votes": {str(p): [payload_body(v) for v in vs] for p, vs in sorted(self.seen_votes.items())},
            "last_context": self.last_context,
            "played_up_to": self.played_up_to,
        }

    def load_state(self, state: dict) -> None:
        self._reset()
        self.join_at = state["join_at"]
        self.epochs = EpochTracker.from_list(state["elections"])
        self.configs = state["configs"]
        self.pending = {
            int(p): {
                "intent": decode_payload(PayloadType.INTENT, canonical_json(r["intent"])),
                "config": r["config"],
                "context": r["context"],
            }
            for p, r in state["pending"].items()
        }
        self.voted = set(state["voted"])
        self.seen_votes = {int(p): [decode_payload(PayloadType.VOTE, canonical_json(v)) for v in vs] for p, vs in state["seen_votes"].items()}
        self.last_context = state["last_context"]
