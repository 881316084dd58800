"""Deterministic scenarios, fault injection and invariant checking."""

from .metrics import StageMetrics, stage_metrics
from .oracle import INVARIANTS, LogEvidence, Violation, check_log, oracle_decision
from .scenarios import BUILTIN_SCENARIOS, ORACLES, Scenario, load_scenario, random_scenario
from .sim import Fault, OracleFailure, ScenarioReport, Simulation, UnknownTarget, run_scenario
from .sweep import SweepReport, crash_point_sweep

__all__ = [
    "BUILTIN_SCENARIOS",
    "Fault",
    "INVARIANTS",
    "LogEvidence",
    "ORACLES",
    "OracleFailure",
    "Scenario",
    "ScenarioReport",
    "Simulation",
    "StageMetrics",
    "SweepReport",
    "UnknownTarget",
    "Violation",
    "check_log",
    "crash_point_sweep",
    "load_scenario",
    "oracle_decision",
    "random_scenario",
    "run_scenario",
    "stage_metrics",
]
