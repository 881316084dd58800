"""Single-file durable AgentBus backend.

File layout: an 8-byte magic header followed by framed records, one per entry,
in position order.  Each record is::

    u32 length     payload byte count
    u32 crc32      zlib.crc32 over position..payload
    u64 position
    u64 realtime_ts  (ms since epoch)
    u8  type tag
    payload        canonical JSON body, ``length`` bytes

All integers are big-endian.  A record that is cut short, or whose checksum
fails while being the last thing in the file, is a torn write and is truncated
away on open (or by the next appender).  A bad checksum anywhere else raises
``CorruptLog``.

Appends from any handle, in any process, take an exclusive ``flock`` on the
file, catch up with records written by others, then write.  Readers never take
the lock; they parse whatever complete records are present.
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Optional

from .bus import AgentBus
from .entries import TAG_TYPES, TYPE_TAGS, LogActError, Permissions, PayloadType

log = logging.getLogger(__name__)

MAGIC = b"AGBUS01\n"
HEADER = struct.Struct(">IIQQB")
_CRC_FROM = 8  # crc covers everything after the length and crc fields


class CorruptLog(LogActError):
    pass


class IoFailure(LogActError):
    pass


def encode_record(position: int, ts: int, ptype: PayloadType, data: bytes) -> bytes:
    body = struct.pack(">QQB", position, ts, TYPE_TAGS[ptype]) + data
    return struct.pack(">II", len(data), zlib.crc32(body)) + body


def acl_path(path) -> Path:
    return Path(str(path) + ".acl.json")


class DurableBus(AgentBus):
    poll_interval = 0.01

    def __init__(self, path, sync_mode: str = "always", clock=None, batch_interval: float = 0.005):
        super().__init__(clock)
        if sync_mode not in ("always", "batched"):
            raise ValueError(f"sync_mode must be 'always' or 'batched', not {sync_mode!r}")
        self.path = Path(path)
        self.sync_mode = sync_mode
        self.batch_interval = batch_interval
        self._end = len(MAGIC)  # byte offset just past the last indexed record
        self._dirty = False
        try:
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as exc:
            raise IoFailure(f"cannot open {self.path}: {exc}") from exc
        try:
            with self._cond, self._flock():
                self._init_header()
                self._scan(repair=True)
        except BaseException:
            os.close(self._fd)
            raise
        self._reload_identities()
        self._flusher: Optional[threading.Thread] = None
        if sync_mode == "batched":
            self._stop_flusher = threading.Event()
            self._flusher = threading.Thread(target=self._flush_loop, name=f"fsync:{self.path.name}", daemon=True)
            self._flusher.start()

    # -- file plumbing ------------------------------------------------------

    @contextlib.contextmanager
    def _flock(self):
        fcntl.flock(self._fd, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(self._fd, fcntl.LOCK_UN)

    def _init_header(self) -> None:
        size = os.fstat(self._fd).st_size
        if size < len(MAGIC):
            head = os.pread(self._fd, size, 0)
            if head != MAGIC[:size]:
                raise CorruptLog(f"{self.path}: not an AgentBus file")
            os.pwrite(self._fd, MAGIC, 0)
            os.ftruncate(self._fd, len(MAGIC))
            os.fsync(self._fd)
        elif os.pread(self._fd, len(MAGIC), 0) != MAGIC:
            raise CorruptLog(f"{self.path}: bad magic header")

    def _scan(self, repair: bool) -> None:
        """Index complete records past ``self._end``; truncate a torn tail if ``repair``."""
        size = os.fstat(self._fd).st_size
        if size <= self._end:
            if size < self._end and repair:
                raise CorruptLog(f"{self.path}: file shrank below indexed length")
            return
        buf = os.pread(self._fd, size - self._end, self._end)
        off = 0
        while off < len(buf):
            rest = len(buf) - off
            torn = rest < HEADER.size
            if not torn:
                length, crc, pos, ts, tag = HEADER.unpack_from(buf, off)
                torn = rest < HEADER.size + length
            if torn:
                self._torn(self._end + off, size, repair)
                break
            rec_end = off + HEADER.size + length
            if zlib.crc32(buf[off + _CRC_FROM:rec_end]) != crc:
                if rec_end == len(buf):
                    self._torn(self._end + off, size, repair)
                    break
                raise CorruptLog(f"{self.path}: checksum mismatch in record at byte {self._end + off}")
            if pos != len(self._types):
                raise CorruptLog(f"{self.path}: record at byte {self._end + off} has position {pos}, expected {len(self._types)}")
            if tag not in TAG_TYPES:
                raise CorruptLog(f"{self.path}: unknown type tag {tag} at position {pos}")
            self._index(pos, ts, TAG_TYPES[tag], bytes(buf[off + HEADER.size:rec_end]))
            off = rec_end
        self._end += off

    def _torn(self, at: int, size: int, repair: bool) -> None:
        if not repair:
            return  # may be a write in progress in another process
        log.warning("%s: truncating torn tail (%d bytes at offset %d)", self.path, size - at, at)
        os.ftruncate(self._fd, at)
        os.fsync(self._fd)

    def _refresh(self) -> None:
        if self._closed:
            return
        self._scan(repair=False)

    def _store(self, ptype: PayloadType, data: bytes) -> int:
        with self._flock():
            self._scan(repair=True)
            pos = len(self._types)
            ts = self._next_ts()
            rec = encode_record(pos, ts, ptype, data)
            try:
                written = os.pwrite(self._fd, rec, self._end)
                while written < len(rec):
                    written += os.pwrite(self._fd, rec[written:], self._end + written)
                if self.sync_mode == "always":
                    os.fsync(self._fd)
                else:
                    self._dirty = True
            except OSError as exc:
                with contextlib.suppress(OSError):
                    os.ftruncate(self._fd, self._end)
                raise IoFailure(f"append to {self.path} failed: {exc}") from exc
            self._index(pos, ts, ptype, data)
            self._end += len(rec)
            return pos

    def _flush_loop(self) -> None:
        while not self._stop_flusher.wait(self.batch_interval):
            self.flush()

    def flush(self) -> None:
        with self._cond:
            if self._dirty and not self._closed:
                os.fsync(self._fd)
                self._dirty = False

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            if self._flusher is not None:
                self._stop_flusher.set()
            if self._dirty:
                os.fsync(self._fd)
            super().close()
            os.close(self._fd)
        if self._flusher is not None and self._flusher is not threading.current_thread():
            self._flusher.join(timeout=1)

    def file_payload_bytes(self) -> int:
        """Payload bytes as found on disk (headers excluded)."""
        with self._cond:
            self._refresh()
            return self._end - len(MAGIC) - HEADER.size * len(self._types)

    # -- identities live next to the file so other processes see them ---------

    def register(self, identity) -> None:
        with self._cond, self._flock():
            self._reload_identities()
            super().register(identity)
            p = acl_path(self.path)
            tmp = p.with_name(p.name + f".tmp{os.getpid()}")
            doc = {cid: perms.to_dict() for cid, perms in sorted(self._identities.items())}
            tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
            os.replace(tmp, p)

    def _reload_identities(self) -> None:
        p = acl_path(self.path)
        if not p.exists():
            return
        try:
            doc = json.loads(p.read_text())
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read identities from {p}: {exc}") from exc
        for cid, perms in doc.items():
            self._identities.setdefault(cid, Permissions.from_dict(perms))


def open_durable_bus(path, sync_mode: str = "always", clock=None, **kwargs) -> DurableBus:
    return DurableBus(path, sync_mode=sync_mode, clock=clock, **kwargs)
