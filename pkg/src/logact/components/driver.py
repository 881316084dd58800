"""The driver: runs inference over the conversation and proposes intents."""

from __future__ import annotations

import logging
from typing import Optional

from ..entries import (
    STATUS_RECOVERY,
    Abort,
    ActionSpec,
    Entry,
    InfIn,
    InfOut,
    Intent,
    Mail,
    Message,
    PayloadType,
    Policy,
    Result,
)
from ..inference import AdapterUnavailable, extract, extract_intent
from ..policies import DriverElection, policy_payload
from .base import Component, EpochTracker, Fenced

log = logging.getLogger(__name__)

INFERENCE_FAILURE = "INFERENCE FAILURE"


def result_message(result: Result) -> Message:
    if result.status == STATUS_RECOVERY:
        return Message("tool", f"[executor recovery] in-doubt intents were not confirmed\n{result.output}")
    return Message("tool", f"[result {result.status}]\n{result.output}")


def abort_message(abort: Abort) -> Message:
    return Message("tool", f"[aborted] {abort.reason}")


class Driver(Component):
    role = "driver"
    wait_types = frozenset({PayloadType.MAIL, PayloadType.RESULT, PayloadType.ABORT, PayloadType.POLICY})

    def __init__(
        self,
        client,
        adapter,
        system_prompt: str = "",
        candidate_id: str = "driver",
        component_id: str = "driver",
        snapshots=None,
        snapshot_every: int = 0,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        clock=None,
    ):
        super().__init__(client, component_id, snapshots, snapshot_every)
        self.adapter = adapter
        self.system_prompt = system_prompt
        self.candidate_id = candidate_id
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.clock = clock or client.bus.clock
        # instance-local: where this instance's own election landed
        self.election_position: Optional[int] = None
        self.epoch = 0
        self._reset()

    def _reset(self) -> None:
        self.conversation: list[Message] = []
        self.inbox: list[Message] = []
        self.pending_intent: Optional[int] = None
        self.awaiting_output = False
        self.awaiting_action: Optional[tuple[int, ActionSpec]] = None
        self.turn = 0
        self.epochs = EpochTracker()
        self.fenced = False

    @property
    def quiescent(self) -> bool:
        return self.pending_intent is None and not self.awaiting_output and self.awaiting_action is None

    # -- election -------------------------------------------------------------------

    def elect(self) -> int:
        """Append an election for this instance and return the epoch it won."""
        self.catch_up()
        claim = DriverElection(self.candidate_id, self.epochs.current + 1)
        pos = self.client.append(policy_payload(claim, self.client.client_id))
        self.election_position = pos
        self.catch_up()
        self.epoch = 1 + sum(1 for p, _ in self.epochs.elections if p < pos)
        return self.epoch

    boot = elect

    # -- fold ---------------------------------------------------------------------------

    def play(self, entry: Entry) -> None:
        p = entry.payload
        if isinstance(p, Policy):
            ordinal = self.epochs.observe(entry)
            if ordinal is not None and self.election_position is not None and entry.position > self.election_position:
                self.fenced = True
        elif isinstance(p, Mail):
            self.inbox.append(Message("user", p.body))
        elif isinstance(p, InfIn):
            if not self.epochs.valid(p.epoch):
                return
            consumed = [m for m in p.delta if m.role != "system"]
            if self.inbox[: len(consumed)] != consumed:
                log.warning("InfIn at %d does not match buffered input", entry.position)
            del self.inbox[: len(consumed)]
            self.conversation.extend(p.delta)
            self.awaiting_output = True
        elif isinstance(p, InfOut):
            if not self.epochs.valid(p.epoch):
                return
            self.conversation.append(Message("assistant", p.text))
            self.turn += 1
            self.awaiting_output = False
            action = extract(p.text).action if p.intent_extracted else None
            self.awaiting_action = (self.turn, action) if action is not None else None
        elif isinstance(p, Intent):
            if not self.epochs.valid(p.driver_epoch):
                return
            if self.awaiting_action is not None and p.turn == self.awaiting_action[0]:
                self.pending_intent = entry.position
                self.awaiting_action = None
        elif isinstance(p, Result):
            if p.status == STATUS_RECOVERY:
                if self.pending_intent is not None and self.pending_intent in p.in_doubt:
                    self.pending_intent = None
                if p.in_doubt:
                    self.inbox.append(result_message(p))
            elif p.intent_position is not None and p.intent_position == self.pending_intent:
                self.pending_intent = None
                self.inbox.append(result_message(p))
        elif isinstance(p, Abort):
            if p.intent_position == self.pending_intent:
                self.pending_intent = None
                self.inbox.append(abort_message(p))

    # -- act ------------------------------------------------------------------------------

    def act(self) -> bool:
        acted = False
        while True:
            if self.fenced:
                raise Fenced(f"{self.candidate_id} (epoch {self.epoch}) was superseded by a newer election")
            if self.awaiting_action is not None:
                turn, action = self.awaiting_action
                self.client.append(Intent(action, self.epoch, turn))
            elif self.awaiting_output:
                text = self._infer()
                ex = extract(text)
                for w in ex.warnings:
                    log.warning("turn %d: %s", self.turn + 1, w)
                self.client.append(InfOut(text, ex.action is not None, self.epoch))
            elif self.pending_intent is None and self.inbox:
                delta = list(self.inbox)
                if not self.conversation and self.system_prompt:
                    delta.insert(0, Message("system", self.system_prompt))
                self.client.append(InfIn(tuple(delta), self.epoch))
            else:
                return acted
            acted = True
            self.catch_up()

    def _infer(self) -> str:
        delay = self.backoff_s
        for attempt in range(1, self.max_retries + 1):
            try:
                return self.adapter.infer(self.conversation)
            except AdapterUnavailable as exc:
                log.warning("inference attempt %d/%d failed: %s", attempt, self.max_retries, exc)
                last = exc
                if attempt < self.max_retries:
                    self.clock.sleep(delay)
                    delay *= 2
        return f"{INFERENCE_FAILURE}: {last}"

    # -- state ----------------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "conversation": [[m.role, m.content] for m in self.conversation],
            "inbox": [[m.role, m.content] for m in self.inbox],
            "pending_intent": self.pending_intent,
            "awaiting_output": self.awaiting_output,
            "awaiting_turn": self.awaiting_action[0] if self.awaiting_action else None,
            "turn": self.turn,
            "elections": self.epochs.to_list(),
            "played_up_to": self.played_up_to,
        }

    def load_state(self, state: dict) -> None:
        self._reset()
        self.conversation = [Message(r, c) for r, c in state["conversation"]]
        self.inbox = [Message(r, c) for r, c in state["inbox"]]
        self.pending_intent = state["pending_intent"]
        self.awaiting_output = state["awaiting_output"]
        self.turn = state["turn"]
        if state["awaiting_turn"] is not None:
            # the proposing InfOut is the last assistant message
            action = extract_intent(self.conversation[-1].content)
            self.awaiting_action = (state["awaiting_turn"], action)
        self.epochs = EpochTracker.from_list(state["elections"])
