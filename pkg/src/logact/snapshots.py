"""Snapshot store: latest component state blob per component id.

On disk: ``<root>/<bus_id>/<component_id>.snap``, a JSON document holding the
log position the state covers, a creation timestamp, the state bytes (base64)
and their crc32.  Files are replaced by atomic rename, so a reader sees either
the previous snapshot or the new one.
"""

from __future__ import annotations

import base64
import json
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .entries import LogActError


class CorruptSnapshot(LogActError):
    pass


class SnapshotError(LogActError):
    pass


@dataclass(frozen=True)
class Snapshot:
    component_id: str
    log_position: int
    state: bytes
    created_ts: int = 0


def _check(snapshot: Snapshot, bus) -> None:
    if snapshot.log_position < 0:
        raise SnapshotError("negative log position")
    if bus is not None and snapshot.log_position > bus.tail():
        raise SnapshotError(f"snapshot position {snapshot.log_position} is past the bus tail {bus.tail()}")


class MemorySnapshotStore:
    def __init__(self, bus=None):
        self.bus = bus
        self._snaps: dict[str, Snapshot] = {}
        self._lock = threading.Lock()

    def put(self, snapshot: Snapshot) -> None:
        _check(snapshot, self.bus)
        with self._lock:
            self._snaps[snapshot.component_id] = snapshot

    def get_latest(self, component_id: str) -> Optional[Snapshot]:
        with self._lock:
            return self._snaps.get(component_id)


_SAFE = re.compile(r"[^A-Za-z0-9_.:-]")


class SnapshotStore:
    """Directory-backed store; one subdirectory per bus."""

    def __init__(self, root, bus_id: str = "default", bus=None):
        self.dir = Path(root) / _SAFE.sub("_", bus_id)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.bus = bus

    def _path(self, component_id: str) -> Path:
        return self.dir / (_SAFE.sub("_", component_id) + ".snap")

    def put(self, snapshot: Snapshot) -> None:
        _check(snapshot, self.bus)
        doc = {
            "component_id": snapshot.component_id,
            "log_position": snapshot.log_position,
            "created_ts": snapshot.created_ts or int(time.time() * 1000),
            "crc32": zlib.crc32(snapshot.state),
            "state": base64.b64encode(snapshot.state).decode("ascii"),
        }
        final = self._path(snapshot.component_id)
        tmp = final.with_name(f"{final.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(json.dumps(doc, sort_keys=True).encode())
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, final)
            dfd = os.open(self.dir, os.O_RDONLY)
            try:
                os.fsync(dfd)
            finally:
                os.close(dfd)
        except OSError as exc:
            raise SnapshotError(f"snapshot write failed: {exc}") from exc
        finally:
            if tmp.exists():
                tmp.unlink()

    def get_latest(self, component_id: str) -> Optional[Snapshot]:
        path = self._path(component_id)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise SnapshotError(f"cannot read {path}: {exc}") from exc
        try:
            doc = json.loads(raw)
            state = base64.b64decode(doc["state"], validate=True)
            ok = zlib.crc32(state) == doc["crc32"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptSnapshot(f"{path}: {exc}") from exc
        if not ok:
            raise CorruptSnapshot(f"{path}: checksum mismatch")
        return Snapshot(doc["component_id"], doc["log_position"], state, doc["created_ts"])


def snapshot_put(store, snapshot: Snapshot) -> None:
    store.put(snapshot)


def snapshot_get_latest(store, component_id: str) -> Optional[Snapshot]:
    return store.get_latest(component_id)
