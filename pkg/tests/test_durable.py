import multiprocessing as mp
import os

import pytest

from logact import CorruptLog, DurableBus, VirtualClock, role_identity
from logact.durable import HEADER, MAGIC, acl_path
from logact.entries import Mail, PayloadType, Vote


def _fill(path, n, sync_mode="always"):
    bus = DurableBus(path, sync_mode, VirtualClock())
    admin = role_identity("admin")
    bus.register(admin)
    for i in range(n):
        bus.append(admin, Mail("a", f"m{i}"))
    bus.close()
    return admin


def _bodies(path):
    bus = DurableBus(path)
    try:
        return [e.payload.body for e in bus.read(role_identity("admin"), 0, bus.tail())]
    finally:
        bus.close()


def test_reopen_preserves_entries_and_acl(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 5)
    assert acl_path(path).exists()
    assert _bodies(path) == [f"m{i}" for i in range(5)]


def test_batched_mode_flushes_on_close(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 20, "batched")
    assert len(_bodies(path)) == 20


def test_torn_tail_is_truncated(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 3)
    good = path.stat().st_size
    with open(path, "ab") as f:
        f.write(b"\x00\x00\x00\x40\x12\x34")  # half a header
    assert _bodies(path) == ["m0", "m1", "m2"]
    assert path.stat().st_size == good


def test_torn_payload_is_truncated(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 3)
    size = path.stat().st_size
    with open(path, "r+b") as f:
        f.truncate(size - 3)  # last record loses its final bytes
    assert _bodies(path) == ["m0", "m1"]
    # the next append lands at the repaired position
    bus = DurableBus(path)
    assert bus.append(role_identity("admin"), Mail("a", "again")) == 2
    bus.close()


def test_bad_checksum_on_last_record_is_a_torn_write(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 3)
    with open(path, "r+b") as f:
        f.seek(-1, os.SEEK_END)
        f.write(b"X")
    assert _bodies(path) == ["m0", "m1"]


def test_corrupt_middle_record_raises(tmp_path):
    path = tmp_path / "b.log"
    _fill(path, 3)
    with open(path, "r+b") as f:
        f.seek(len(MAGIC) + HEADER.size + 2)  # inside the first payload
        f.write(b"Z")
    with pytest.raises(CorruptLog):
        DurableBus(path)


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "b.log"
    path.write_bytes(b"NOTABUS!" + b"\x00" * 40)
    with pytest.raises(CorruptLog):
        DurableBus(path)


def test_empty_file_gets_a_header(tmp_path):
    path = tmp_path / "b.log"
    path.write_bytes(b"")
    DurableBus(path).close()
    assert path.read_bytes() == MAGIC


def test_acl_survives_and_is_enforced_after_reopen(tmp_path):
    path = tmp_path / "b.log"
    bus = DurableBus(path)
    bus.register(role_identity("executor"))
    bus.close()
    bus = DurableBus(path)
    with pytest.raises(Exception) as exc:
        bus.append(role_identity("executor"), Vote(0, "rule", "x", "approve"))
    assert "may not append" in str(exc.value)
    bus.close()


def test_second_handle_sees_appends(tmp_path):
    path = tmp_path / "b.log"
    a = DurableBus(path)
    admin = role_identity("admin")
    a.register(admin)
    b = DurableBus(path)
    assert a.append(admin, Mail("a", "x")) == 0
    assert b.append(admin, Mail("b", "y")) == 1
    assert [e.payload.body for e in a.poll(admin, 0, {PayloadType.MAIL})] == ["x", "y"]
    a.close()
    b.close()


def _writer(path, tag, n):
    bus = DurableBus(path)
    ident = role_identity("admin")
    for i in range(n):
        bus.append(ident, Mail(tag, str(i)))
    bus.close()


def test_multi_process_appends_interleave_safely(tmp_path):
    path = tmp_path / "b.log"
    DurableBus(path).register(role_identity("admin"))
    ctx = mp.get_context("fork")
    procs = [ctx.Process(target=_writer, args=(path, f"p{k}", 40)) for k in range(4)]
    for p in procs:
        p.start()
    for p in procs:
        p.join(60)
        assert p.exitcode == 0
    bus = DurableBus(path)
    entries = bus.read(role_identity("admin"), 0, bus.tail())
    bus.close()
    assert [e.position for e in entries] == list(range(160))
    for k in range(4):
        mine = [e.payload.body for e in entries if e.payload.sender == f"p{k}"]
        assert mine == [str(i) for i in range(40)]
