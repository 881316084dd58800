import threading
import time

import pytest
from hypothesis import given, strategies as st

from logact import MemoryBus, PermissionDenied, VirtualClock, role_identity
from logact.entries import (
    ALL_TYPES,
    BusClosed,
    ClientIdentity,
    Commit,
    InvalidRange,
    Mail,
    PayloadType,
    Permissions,
    Policy,
    Vote,
    encode_payload,
    payload_type,
)

from strategies import payloads

T = PayloadType


def test_positions_are_dense_and_start_at_zero(any_bus, ids):
    admin = any_bus.session(ids["admin"])
    assert [admin.append(Mail("a", str(i))) for i in range(5)] == [0, 1, 2, 3, 4]
    assert admin.tail() == 5


def test_read_returns_half_open_range(any_bus, ids):
    admin = any_bus.session(ids["admin"])
    for i in range(4):
        admin.append(Mail("a", str(i)))
    assert [e.payload.body for e in admin.read(1, 3)] == ["1", "2"]
    assert admin.read(4, 4) == []
    assert len(admin.read(0, 99)) == 4
    with pytest.raises(InvalidRange):
        admin.read(3, 1)


def test_append_acl(any_bus, ids):
    ex = any_bus.session(ids["executor"])
    for p in (Vote(0, "rule", "x", "approve"), Commit(0), Policy("decider", "x", {})):
        with pytest.raises(PermissionDenied):
            ex.append(p)
    with pytest.raises(PermissionDenied):
        any_bus.append(role_identity("admin", "stranger"), Mail("s", "hi"))
    assert any_bus.tail() == 0


def test_driver_may_only_append_elections(any_bus, ids):
    drv = any_bus.session(ids["driver"])
    drv.append(Policy("driver_election", "d", {"kind": "driver_election", "candidate": "d", "epoch": 1}))
    with pytest.raises(PermissionDenied):
        drv.append(Policy("decider", "d", {"kind": "decider", "expr": "on_by_default"}))


def test_read_hides_unreadable_types(any_bus, ids):
    admin = any_bus.session(ids["admin"])
    admin.append(Mail("a", "x"))
    any_bus.session(ids["decider"]).append(Commit(0))
    user = any_bus.session(ids["user"])
    assert [e.type for e in user.read(0, 2)] == [T.MAIL]
    assert user.tail() == 2


def test_poll_permission_and_filter(any_bus, ids):
    admin = any_bus.session(ids["admin"])
    admin.append(Mail("a", "x"))
    admin.append(Policy("decider", "admin", {"kind": "decider", "expr": "on_by_default"}))
    admin.append(Mail("a", "y"))
    assert [e.position for e in admin.poll(0, {T.MAIL})] == [0, 2]
    assert [e.position for e in admin.poll(1, {T.MAIL, T.POLICY})] == [1, 2]
    assert admin.poll(3, {T.MAIL}) == []
    with pytest.raises(PermissionDenied):
        any_bus.session(ids["executor"]).poll(0, {T.MAIL})
    with pytest.raises(ValueError):
        admin.poll(0, set())


def test_poll_wakes_on_append(any_bus, ids):
    admin = any_bus.session(ids["admin"])
    got = []
    t = threading.Thread(target=lambda: got.extend(admin.poll(0, {T.MAIL}, timeout=5)))
    t.start()
    time.sleep(0.05)
    admin.append(Mail("a", "late"))
    t.join(5)
    assert [e.payload.body for e in got] == ["late"]


def test_poll_times_out(any_bus, ids):
    t0 = time.monotonic()
    assert any_bus.session(ids["admin"]).poll(0, {T.MAIL}, timeout=0.1) == []
    assert time.monotonic() - t0 >= 0.09


def test_closed_bus_refuses(mem_bus):
    admin = role_identity("admin")
    mem_bus.register(admin)
    mem_bus.close()
    with pytest.raises(BusClosed):
        mem_bus.append(admin, Mail("a", "x"))


def test_reregister_with_other_permissions_fails(mem_bus):
    mem_bus.register(role_identity("user", "x"))
    mem_bus.register(role_identity("user", "x"))
    with pytest.raises(ValueError):
        mem_bus.register(role_identity("admin", "x"))


def test_timestamps_never_go_backwards():
    clock = VirtualClock(1000)
    bus = MemoryBus(clock)
    admin = role_identity("admin")
    bus.register(admin)
    bus.append(admin, Mail("a", "1"))
    clock._now = 500  # a wall clock stepping back
    bus.append(admin, Mail("a", "2"))
    ts = [e.realtime_ts for e in bus.read(admin, 0, 2)]
    assert ts == sorted(ts)


@given(st.lists(payloads, max_size=25))
def test_accounting_matches_payloads(ps):
    bus = MemoryBus(VirtualClock())
    admin = role_identity("admin")
    bus.register(admin)
    god = ClientIdentity("god", Permissions(ALL_TYPES, ALL_TYPES, ALL_TYPES))
    bus.register(god)
    expected: dict = {}
    for p in ps:
        bus.append(god, p)
        expected[payload_type(p)] = expected.get(payload_type(p), 0) + len(encode_payload(p))
    assert bus.payload_bytes_by_type() == expected
    assert [e.payload for e in bus.read(admin, 0, len(ps))] == ps
