from .base import Component, Crash, EpochTracker, Fenced
from .decider import Decider
from .driver import Driver
from .executor import Executor, executor_boot
from .recovery import driver_elect, recover_component
from .runner import ComponentThread
from .sandbox import BUILTINS, SandboxViolation, run_action
from .voter import CallableBehavior, LLMBehavior, RuleBehavior, Voter

__all__ = [
    "BUILTINS",
    "CallableBehavior",
    "Component",
    "ComponentThread",
    "Crash",
    "Decider",
    "Driver",
    "EpochTracker",
    "Executor",
    "Fenced",
    "LLMBehavior",
    "RuleBehavior",
    "SandboxViolation",
    "Voter",
    "driver_elect",
    "executor_boot",
    "recover_component",
    "run_action",
]
