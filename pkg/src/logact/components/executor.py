"""The executor: plays commits, runs actions in the sandbox, appends results.

The executor is not a replicated state machine; it aims for at-most-once
execution.  A booting executor appends a recovery Result which fences every
earlier Commit: anything committed before it counts as possibly executed and
is never run by this executor.  The fence lists the committed intents that
have no result (``in_doubt``) so the driver can stop waiting for them.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional

from ..entries import STATUS_RECOVERY, Commit, Entry, Intent, PayloadType, Policy, Result
from .base import Component, EpochTracker
from .sandbox import run_action

log = logging.getLogger(__name__)


class Executor(Component):
    role = "executor"
    wait_types = frozenset({PayloadType.COMMIT, PayloadType.POLICY})

    def __init__(
        self,
        client,
        sandbox_root,
        component_id: str = "executor",
        builtins: Optional[dict[str, Callable]] = None,
        shell_timeout: float = 60.0,
        on_progress=None,
        on_execute=None,
    ):
        super().__init__(client, component_id)
        self.sandbox_root = Path(sandbox_root)
        self.builtins = builtins
        self.shell_timeout = shell_timeout
        self.on_progress = on_progress
        self.on_execute = on_execute
        self._started: set[int] = set()
        self.epochs = EpochTracker()
        self.intents: dict[int, Intent] = {}
        self.committed: set[int] = set()
        self.executed: set[int] = set()  # run, or fenced as possibly run
        self.resulted: set[int] = set()
        self.listed: set[int] = set()  # named in some recovery result
        self.fence: Optional[int] = None

    def play(self, entry: Entry) -> None:
        p = entry.payload
        if isinstance(p, Policy):
            self.epochs.observe(entry)
        elif isinstance(p, Intent):
            if self.epochs.valid(p.driver_epoch):
                self.intents[entry.position] = p
        elif isinstance(p, Commit):
            self.committed.add(p.intent_position)
        elif isinstance(p, Result):
            if p.status == STATUS_RECOVERY:
                self.fence = entry.position
                self.executed |= self.committed
                self.listed.update(p.in_doubt)
            elif p.intent_position is not None:
                self.resulted.add(p.intent_position)
                self.executed.add(p.intent_position)

    def unconfirmed(self) -> list[int]:
        return sorted(p for p in self.committed if p not in self.resulted and p not in self.listed)

    def boot(self) -> int:
        """Append the recovery fence; returns its position."""
        self.catch_up()
        fence = self.client.append(Result(None, STATUS_RECOVERY, self._fence_note(), tuple(self.unconfirmed())))
        self.catch_up()
        # commits that landed between our scan and the fence are fenced too
        while extra := [p for p in self.unconfirmed() if p in self.executed]:
            self.client.append(Result(None, STATUS_RECOVERY, self._fence_note(extra), tuple(extra)))
            self.catch_up()
        return fence

    def _fence_note(self, in_doubt=None) -> str:
        in_doubt = self.unconfirmed() if in_doubt is None else in_doubt
        if not in_doubt:
            return "executor started; nothing in doubt"
        listed = ", ".join(str(p) for p in in_doubt)
        return f"executor restarted; intents {listed} were committed but their outcome is unknown and they will not be re-run"

    def act(self) -> bool:
        acted = False
        for pos in sorted(self.committed):
            if pos in self.executed or pos in self._started:
                continue
            intent = self.intents.get(pos)
            self._started.add(pos)
            if intent is None:
                log.warning("commit for unknown or fenced intent %d ignored", pos)
                continue
            if self.on_execute is not None:
                self.on_execute(pos, self.client.tail())
            status, output = run_action(
                intent.action,
                self.sandbox_root,
                pos,
                self.builtins,
                self.shell_timeout,
                client=self.client,
                on_progress=self.on_progress,
            )
            self.client.append(Result(pos, status, output))
            acted = True
            self.catch_up()
        return acted

    def state_dict(self) -> dict:
        return {
            "elections": self.epochs.to_list(),
            "intents": sorted(self.intents),
            "committed": sorted(self.committed),
            "executed": sorted(self.executed),
            "resulted": sorted(self.resulted),
            "fence": self.fence,
            "played_up_to": self.played_up_to,
        }

    def load_state(self, state: dict) -> None:
        raise NotImplementedError("executors rebuild from the log on boot")


def executor_boot(client, sandbox_root, **kwargs) -> Executor:
    ex = Executor(client, sandbox_root, **kwargs)
    ex.boot()
    return ex
