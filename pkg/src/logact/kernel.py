"""AgentKernel: creates buses and optionally stands up components on them.

Memory buses live in this process and their components run on threads.
Durable buses get one OS process per component (``logctl run``), so an
executor never shares an address space with the voters and deciders that
police it.  Destroying a bus stops its components and keeps the bus file.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .bus import AgentBus, MemoryBus
from .clock import RealClock
from .components import ComponentThread, Decider, Driver, Executor, Voter
from .components.recovery import driver_elect, recover_component
from .components.voter import LLMBehavior, RuleBehavior
from .durable import DurableBus
from .entries import (
    ROLE_PERMISSIONS,
    ClientIdentity,
    LogActError,
    Mail,
    Permissions,
    Policy,
    role_identity,
)
from .inference import load_adapter
from .policies import parse_policy, policy_kind
from .snapshots import MemorySnapshotStore, SnapshotStore

log = logging.getLogger(__name__)

READY_TIMEOUT_S = 20.0


class DuplicateBusId(LogActError):
    pass


class UnknownBusId(LogActError):
    pass


class SpawnFailure(LogActError):
    pass


@dataclass
class BusSpec:
    """What to create.

    ``auto_decider`` is a decider policy document, ``auto_voters`` a list of
    voter configs, ``spawn`` a mapping with ``driver``, ``executor`` and an
    optional initial ``task`` delivered as the first Mail.  ``identities``
    are extra clients to register (``{client_id, role}`` or full permissions).
    """

    bus_id: str
    backend: str = "memory"
    path: Optional[str] = None
    sync_mode: str = "always"
    snapshot_dir: Optional[str] = None
    auto_decider: Optional[dict] = None
    decider_timeout_s: float = 30.0
    auto_voters: list[dict] = field(default_factory=list)
    spawn: Optional[dict] = None
    identities: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.bus_id or "/" in self.bus_id:
            raise ValueError(f"bad bus id {self.bus_id!r}")
        if self.backend not in ("memory", "durable"):
            raise ValueError(f"backend must be memory or durable, not {self.backend!r}")
        if self.auto_decider is not None:
            parse_policy(self.auto_decider)
        if self.spawn is not None:
            has_decider = any(ClientIdentity.from_dict(i).permissions == ROLE_PERMISSIONS["decider"] for i in self.identities)
            if self.auto_decider is None and not has_decider:
                raise ValueError("spawn needs auto_decider or an explicit decider identity")
        ids = [v.get("id") for v in self.auto_voters]
        if None in ids or len(set(ids)) != len(ids):
            raise ValueError("every auto voter needs a distinct id")

    @classmethod
    def from_dict(cls, d: dict) -> "BusSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "BusSpec":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))


@dataclass
class ComponentHandle:
    name: str
    role: str
    client_id: str
    thread: Optional[ComponentThread] = None
    process: Optional[subprocess.Popen] = None
    pid: Optional[int] = None

    @property
    def alive(self) -> bool:
        if self.thread is not None:
            return self.thread.is_alive()
        if self.process is not None:
            return self.process.poll() is None
        return self.pid is not None and _pid_alive(self.pid)

    def stop(self, timeout: float = 10.0) -> None:
        if self.thread is not None:
            self.thread.stop(timeout)
            return
        pid = self.process.pid if self.process is not None else self.pid
        if pid is None or not self.alive:
            return
        try:
            os.kill(pid, signal.SIGTERM)
        except ProcessLookupError:
            return
        deadline = time.monotonic() + timeout
        while self.alive and time.monotonic() < deadline:
            time.sleep(0.02)
        if self.alive:
            os.kill(pid, signal.SIGKILL)
        if self.process is not None:
            self.process.wait()


def _pid_alive(pid: int) -> bool:
    """True for a running process; exited children and zombies count as dead."""
    try:
        if os.waitpid(pid, os.WNOHANG)[0] == pid:
            return False
    except ChildProcessError:
        pass
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:
        with open(f"/proc/{pid}/stat") as f:
            return f.read().rsplit(")", 1)[1].split()[0] != "Z"
    except (OSError, IndexError):
        return True


@dataclass
class BusHandle:
    spec: BusSpec
    bus: AgentBus
    components: list[ComponentHandle] = field(default_factory=list)
    identities: dict[str, Permissions] = field(default_factory=dict)

    @property
    def bus_id(self) -> str:
        return self.spec.bus_id


def component_config(spec: BusSpec, role: str, client_id: str, bus_path: str, extra: dict) -> dict:
    """The YAML mapping consumed by ``logctl run``."""
    cfg: dict[str, Any] = {
        "bus": bus_path,
        "sync_mode": spec.sync_mode,
        "identity": {"client_id": client_id, "role": role},
        "component_id": client_id,
    }
    if spec.snapshot_dir:
        cfg["snapshot_dir"] = spec.snapshot_dir
        cfg["bus_id"] = spec.bus_id
    cfg[role] = extra
    return cfg


def build_component(cfg: dict, bus: AgentBus, clock=None):
    """Construct (not boot) the component described by a role config."""
    ident = ClientIdentity.from_dict(cfg["identity"])
    role = _role_of(ident)
    client = bus.session(ident)
    clock = clock or bus.clock
    snapshots = None
    if cfg.get("snapshot_dir"):
        snapshots = SnapshotStore(cfg["snapshot_dir"], cfg.get("bus_id", "default"), bus=bus)
    elif role in ("driver", "decider", "voter"):
        snapshots = MemorySnapshotStore(bus=bus)
    cid = cfg.get("component_id", ident.client_id)
    every = int(cfg.get("snapshot_every", 16))
    rc = cfg.get(role) or {}
    if role == "driver":
        adapter = load_adapter(rc.get("inference", {"kind": "echo"}), clock)
        return Driver(client, adapter, rc.get("system_prompt", ""), candidate_id=rc.get("candidate_id", cid),
                      component_id=cid, snapshots=snapshots, snapshot_every=every, clock=clock)
    if role == "decider":
        return Decider(client, component_id=cid, default_policy=parse_policy(rc["policy"]) if rc.get("policy") else None,
                       timeout_s=float(rc.get("timeout_s", 30)), snapshots=snapshots, snapshot_every=every, clock=clock)
    if role == "executor":
        sandbox = Path(rc.get("sandbox", "sandbox"))
        sandbox.mkdir(parents=True, exist_ok=True)
        return Executor(client, sandbox, component_id=cid, shell_timeout=float(rc.get("shell_timeout", 60)))
    if role == "voter":
        kind = rc.get("type", "rule")
        if kind == "rule":
            behavior = RuleBehavior(rc.get("rules", []), rc.get("default", "approve"))
        elif kind == "llm":
            behavior = LLMBehavior(load_adapter(rc.get("adapter", {"kind": "echo"}), clock), rc.get("system_prompt", ""), rc.get("override_of"))
        else:
            raise ValueError(f"voter type {kind!r} cannot be configured from a file")
        return Voter(client, behavior, voter_id=rc.get("id", ident.client_id), voter_type=rc.get("voter_type"),
                     snapshots=snapshots, snapshot_every=every)
    raise ValueError(f"role {role!r} has no component")


def boot_component(comp, cfg: dict) -> None:
    """Live start and restart share this path."""
    if isinstance(comp, Driver):
        driver_elect(comp)
    elif isinstance(comp, Executor):
        comp.boot()
    elif isinstance(comp, Voter) and (cfg.get("voter") or {}).get("join", "tail") == "tail":
        if comp.restore():
            comp.catch_up()
        else:
            comp.join_at_tail()
    else:
        recover_component(comp)


def _role_of(ident: ClientIdentity) -> str:
    for role, perms in ROLE_PERMISSIONS.items():
        if perms == ident.permissions:
            return role
    raise ValueError(f"identity {ident.client_id!r} does not match any role's permissions")


class Kernel:
    """Registry of buses; safe for concurrent create/list/destroy."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._lock = threading.RLock()
        self._buses: dict[str, BusHandle] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    # -- registry persistence (durable buses only) -----------------------------------

    @property
    def _registry_path(self) -> Optional[Path]:
        return self.root / "registry.json" if self.root is not None else None

    def _load_registry(self) -> dict:
        p = self._registry_path
        if p is None or not p.exists():
            return {}
        return json.loads(p.read_text())

    def _save_registry(self, reg: dict) -> None:
        p = self._registry_path
        if p is None:
            return
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(reg, indent=2, sort_keys=True))
        os.replace(tmp, p)

    # -- operations ----------------------------------------------------------------------

    def create_bus(self, spec: BusSpec) -> BusHandle:
        with self._lock:
            if spec.bus_id in self._buses or spec.bus_id in self._load_registry():
                raise DuplicateBusId(spec.bus_id)
            if spec.backend == "durable":
                path = Path(spec.path) if spec.path else self._default_path(spec.bus_id)
                path.parent.mkdir(parents=True, exist_ok=True)
                bus: AgentBus = DurableBus(path, spec.sync_mode, RealClock())
                spec.path = str(path)
            else:
                bus = MemoryBus(RealClock())
            handle = BusHandle(spec, bus)
            try:
                self._register_identities(handle)
                self._start_components(handle)
            except BaseException:
                for c in handle.components:
                    c.stop()
                bus.close()
                raise
            self._buses[spec.bus_id] = handle
            if spec.backend == "durable":
                reg = self._load_registry()
                reg[spec.bus_id] = {"spec": asdict(spec), "components": [
                    {"name": c.name, "role": c.role, "client_id": c.client_id, "pid": c.process.pid if c.process else None}
                    for c in handle.components]}
                self._save_registry(reg)
            return handle

    def _default_path(self, bus_id: str) -> Path:
        if self.root is None:
            raise ValueError("a durable bus needs a path or a kernel root directory")
        return self.root / "buses" / f"{bus_id}.log"

    def _register_identities(self, h: BusHandle) -> None:
        spec = h.spec
        wanted = [role_identity("admin", "kernel"), role_identity("user", "kernel-mail")]
        if spec.auto_decider is not None:
            wanted.append(role_identity("decider", "decider"))
        for v in spec.auto_voters:
            wanted.append(role_identity("voter", v["id"]))
        if spec.spawn is not None:
            wanted.append(role_identity("driver", "driver"))
            wanted.append(role_identity("executor", "executor"))
        wanted += [ClientIdentity.from_dict(d) for d in spec.identities]
        for ident in wanted:
            h.bus.register(ident)
            h.identities[ident.client_id] = ident.permissions

    def _component_plan(self, h: BusHandle) -> list[tuple[str, str, dict]]:
        spec = h.spec
        plan: list[tuple[str, str, dict]] = []
        if spec.auto_decider is not None:
            plan.append(("decider", "decider", {"timeout_s": spec.decider_timeout_s}))
        for v in spec.auto_voters:
            plan.append(("voter", v["id"], {**v, "join": v.get("join", "start")}))
        if spec.spawn is not None:
            ex = dict(spec.spawn.get("executor", {}))
            if "sandbox" not in ex:
                base = self.root if self.root is not None else Path(spec.path or ".").parent
                ex["sandbox"] = str(Path(base).resolve() / "sandboxes" / spec.bus_id)
            plan.append(("executor", "executor", ex))
            plan.append(("driver", "driver", dict(spec.spawn.get("driver", {}))))
        return plan

    def _start_components(self, h: BusHandle) -> None:
        spec = h.spec
        if spec.auto_decider is not None:
            # the policy goes on the log, where every replay will find it
            admin = h.bus.session(role_identity("admin", "kernel"))
            parsed = parse_policy(spec.auto_decider)
            admin.append(Policy(policy_kind(parsed), "kernel", dict(spec.auto_decider)))
        for role, client_id, extra in self._component_plan(h):
            cfg = component_config(spec, role, client_id, spec.path or "", extra)
            if spec.backend == "memory":
                comp = build_component(cfg, h.bus)
                t = ComponentThread(comp, boot=lambda c, cfg=cfg: boot_component(c, cfg))
                t.start()
                h.components.append(ComponentHandle(client_id, role, client_id, thread=t))
            else:
                h.components.append(self._spawn_process(spec, role, client_id, cfg))
        task = (spec.spawn or {}).get("task")
        if task:
            self.send_mail_on(h, role_identity("user", "kernel-mail"), task)

    def _spawn_process(self, spec: BusSpec, role: str, client_id: str, cfg: dict) -> ComponentHandle:
        cdir = self.root / "components" / spec.bus_id if self.root else Path(spec.path).parent / f"{spec.bus_id}.components"
        cdir.mkdir(parents=True, exist_ok=True)
        cfg_path = cdir / f"{client_id}.yaml"
        ready = cdir / f"{client_id}.ready"
        if ready.exists():
            ready.unlink()
        cfg["ready_file"] = str(ready)
        cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=False))
        logf = open(cdir / f"{client_id}.log", "ab")
        try:
            proc = subprocess.Popen(
                [sys.executable, "-m", "logact.cli", "run", role, "--config", str(cfg_path)],
                stdout=logf, stderr=subprocess.STDOUT, start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailure(f"could not start {role} {client_id}: {exc}") from exc
        finally:
            logf.close()
        handle = ComponentHandle(client_id, role, client_id, process=proc, pid=proc.pid)
        deadline = time.monotonic() + READY_TIMEOUT_S
        while not ready.exists():
            if proc.poll() is not None:
                tail = (cdir / f"{client_id}.log").read_text(errors="replace")[-2000:]
                raise SpawnFailure(f"{role} {client_id} exited with status {proc.returncode}:\n{tail}")
            if time.monotonic() > deadline:
                handle.stop()
                raise SpawnFailure(f"{role} {client_id} did not become ready in {READY_TIMEOUT_S}s")
            time.sleep(0.02)
        return handle

    def list_buses(self) -> list[dict]:
        with self._lock:
            out = {}
            for bus_id, entry in self._load_registry().items():
                out[bus_id] = {
                    "bus_id": bus_id,
                    "backend": "durable",
                    "path": entry["spec"]["path"],
                    "components": [{**c, "alive": c["pid"] is not None and _pid_alive(c["pid"])} for c in entry["components"]],
                }
            for bus_id, h in self._buses.items():
                out[bus_id] = {
                    "bus_id": bus_id,
                    "backend": h.spec.backend,
                    "path": h.spec.path,
                    "components": [{"name": c.name, "role": c.role, "client_id": c.client_id, "alive": c.alive} for c in h.components],
                }
            return [out[k] for k in sorted(out)]

    def destroy_bus(self, bus_id: str) -> dict:
        """Stop the bus's components, then release it.  Bus files are kept."""
        with self._lock:
            h = self._buses.pop(bus_id, None)
            reg = self._load_registry()
            entry = reg.pop(bus_id, None)
            if h is None and entry is None:
                raise UnknownBusId(bus_id)
            stopped = []
            if h is not None:
                for c in reversed(h.components):
                    c.stop()
                    stopped.append(c.name)
                h.bus.close()
            elif entry is not None:
                for c in reversed(entry["components"]):
                    if c["pid"] is not None:
                        ComponentHandle(c["name"], c["role"], c["client_id"], pid=c["pid"]).stop()
                        stopped.append(c["name"])
            if entry is not None:
                self._save_registry(reg)
            path = (h.spec.path if h is not None else entry["spec"]["path"])
            return {"bus_id": bus_id, "stopped": stopped, "retained": path}

    def handle(self, bus_id: str) -> BusHandle:
        with self._lock:
            try:
                return self._buses[bus_id]
            except KeyError:
                raise UnknownBusId(bus_id) from None

    def send_mail(self, bus_id: str, sender: ClientIdentity, body: str) -> int:
        return self.send_mail_on(self.handle(bus_id), sender, body)

    @staticmethod
    def send_mail_on(h: BusHandle, sender: ClientIdentity, body: str) -> int:
        return h.bus.append(sender, Mail(sender.client_id, body))

    def close(self) -> None:
        for bus_id in list(self._buses):
            self.destroy_bus(bus_id)
