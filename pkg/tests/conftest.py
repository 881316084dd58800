import os

import pytest
from hypothesis import HealthCheck, settings

from logact import DurableBus, MemoryBus, VirtualClock, role_identity

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: ln.split("criterion ")[1]):
            terminalreporter.write_line(line)


ROLES = ("driver", "voter", "decider", "executor", "user", "admin", "auditor")


def register_roles(bus):
    ids = {r: role_identity(r) for r in ROLES}
    for ident in ids.values():
        bus.register(ident)
    return ids


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def mem_bus(clock):
    bus = MemoryBus(clock)
    yield bus
    bus.close()


@pytest.fixture
def durable_bus(tmp_path, clock):
    bus = DurableBus(tmp_path / "bus.log", "always", clock)
    yield bus
    bus.close()


@pytest.fixture(params=["memory", "durable"])
def any_bus(request, tmp_path, clock):
    bus = MemoryBus(clock) if request.param == "memory" else DurableBus(tmp_path / "bus.log", "always", clock)
    yield bus
    bus.close()


@pytest.fixture
def ids(any_bus):
    return register_roles(any_bus)
