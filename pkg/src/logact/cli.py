"""logctl: operator tool for LogAct buses.

Exit codes: 0 success, 1 a harness run failed its oracles, 2 permission
denied (including a missing identity), 3 malformed input, 4 unknown bus.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import yaml

from .clock import RealClock
from .durable import CorruptLog, DurableBus
from .entries import (
    ClientIdentity,
    Entry,
    MalformedPayload,
    Mail,
    PayloadType,
    PermissionDenied,
    Policy,
    canonical_json,
    payload_body,
    role_identity,
)
from .policies import MalformedPolicy, parse_policy, policy_kind

log = logging.getLogger("logctl")

EXIT_OK, EXIT_FAILED, EXIT_PERMISSION, EXIT_MALFORMED, EXIT_UNKNOWN_BUS = 0, 1, 2, 3, 4
SUMMARY_CHARS = 200
IDENTITY_ENV = "LOGCTL_IDENTITY"


class UnknownBus(Exception):
    pass


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_MALFORMED, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------------------


def load_identity(path: Optional[str]) -> ClientIdentity:
    path = path or os.environ.get(IDENTITY_ENV)
    if not path:
        raise CliError(EXIT_PERMISSION, f"no identity: pass --identity FILE or set {IDENTITY_ENV}")
    try:
        with open(path) as f:
            return ClientIdentity.from_dict(yaml.safe_load(f))
    except FileNotFoundError:
        raise CliError(EXIT_PERMISSION, f"identity file {path} not found") from None
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_MALFORMED, f"bad identity file {path}: {exc}") from None


def open_bus(path: str, sync_mode: str = "always") -> DurableBus:
    if not Path(path).is_file():
        raise UnknownBus(path)
    return DurableBus(path, sync_mode, RealClock())


def parse_types(spec: Optional[str]) -> Optional[frozenset[PayloadType]]:
    if not spec:
        return None
    try:
        return frozenset(PayloadType.parse(t.strip()) for t in spec.split(",") if t.strip())
    except ValueError as exc:
        raise CliError(EXIT_MALFORMED, str(exc)) from None


def format_entry(e: Entry, raw: bool = False) -> str:
    ts = datetime.fromtimestamp(e.realtime_ts / 1000, tz=timezone.utc).isoformat(timespec="milliseconds")
    body = canonical_json(payload_body(e.payload)).decode()
    if not raw and len(body) > SUMMARY_CHARS:
        body = body[:SUMMARY_CHARS] + "..."
    return f"{e.position:>6}  {ts}  {e.type.value:<7}  {body}"


def entry_json(e: Entry) -> str:
    return json.dumps({"position": e.position, "ts": e.realtime_ts, "type": e.type.value, "body": payload_body(e.payload)},
                      sort_keys=True, ensure_ascii=False)


def _stop_on_signals() -> threading.Event:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    return stop


# -- bus commands -------------------------------------------------------------------------


def cmd_tail(args) -> int:
    ident = load_identity(args.identity)
    types = parse_types(args.types)
    bus = open_bus(args.bus)
    try:
        client = bus.session(ident)
        perms = client.permissions
        if types is not None and not types <= perms.readable:
            bad = ", ".join(sorted(t.value for t in types - perms.readable))
            raise PermissionDenied(f"{ident.client_id!r} may not read {bad}")
        show = lambda e: types is None or e.type in types  # noqa: E731
        emit = entry_json if args.json else (lambda e: format_entry(e, args.raw))
        pos = args.start
        for e in client.read(pos, client.tail()):
            if show(e):
                print(emit(e), flush=True)
        pos = max(pos, client.tail())
        if not args.follow:
            return EXIT_OK
        wanted = (types or perms.readable) & perms.pollable
        if not wanted:
            raise PermissionDenied(f"{ident.client_id!r} may not poll any of the requested types")
        stop = _stop_on_signals()
        while not stop.is_set():
            for e in client.poll(pos, wanted, timeout=0.5):
                print(emit(e), flush=True)
                pos = e.position + 1
        return EXIT_OK
    finally:
        bus.close()


def cmd_mail(args) -> int:
    ident = load_identity(args.identity)
    bus = open_bus(args.bus)
    try:
        pos = bus.append(ident, Mail(args.sender or ident.client_id, args.body))
    finally:
        bus.close()
    print(pos)
    return EXIT_OK


def cmd_policy(args) -> int:
    ident = load_identity(args.identity)
    try:
        with open(args.file) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise CliError(EXIT_MALFORMED, f"policy file {args.file} not found") from None
    except yaml.YAMLError as exc:
        raise MalformedPolicy(f"unparseable policy document: {exc}") from None
    kind = policy_kind(parse_policy(doc))
    bus = open_bus(args.bus)
    try:
        pos = bus.append(ident, Policy(kind, ident.client_id, doc))
    finally:
        bus.close()
    print(pos)
    return EXIT_OK


def cmd_identity(args) -> int:
    ident = role_identity(args.role, args.client_id)
    if args.action == "new":
        text = yaml.safe_dump({"client_id": ident.client_id, "role": args.role}, sort_keys=False)
        if args.output:
            Path(args.output).write_text(text)
        else:
            print(text, end="")
        return EXIT_OK
    # add: register on an existing bus (local file access stands in for operator rights)
    bus = open_bus(args.bus)
    try:
        bus.register(ident)
    finally:
        bus.close()
    print(f"registered {ident.client_id} as {args.role}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .components import Fenced
    from .kernel import boot_component, build_component

    try:
        with open(args.config) as f:
            cfg = yaml.safe_load(f)
        role = cfg["identity"]["role"] if "role" in cfg["identity"] else None
    except FileNotFoundError:
        raise CliError(EXIT_MALFORMED, f"config {args.config} not found") from None
    except (yaml.YAMLError, KeyError, TypeError) as exc:
        raise CliError(EXIT_MALFORMED, f"bad component config: {exc}") from None
    if role is not None and role != args.role:
        raise CliError(EXIT_MALFORMED, f"config is for role {role!r}, not {args.role!r}")
    bus = open_bus(cfg["bus"], cfg.get("sync_mode", "always"))
    stop = _stop_on_signals()
    try:
        comp = build_component(cfg, bus)
        boot_component(comp, cfg)
        if cfg.get("ready_file"):
            Path(cfg["ready_file"]).write_text(f"{os.getpid()}\n")
        print(f"ready {comp.component_id} at position {comp.played_up_to}", flush=True)
        while not stop.is_set():
            if not comp.step():
                comp.wait(float(cfg.get("poll_timeout", 0.2)))
    except Fenced as exc:
        print(f"stopping: {exc}", flush=True)
    finally:
        bus.close()
    return EXIT_OK


# -- kernel commands ----------------------------------------------------------------------


def cmd_kernel(args) -> int:
    from .kernel import BusSpec, Kernel

    kernel = Kernel(args.root)
    if args.action == "create":
        try:
            spec = BusSpec.load(args.spec)
        except (yaml.YAMLError, TypeError, ValueError, MalformedPolicy) as exc:
            raise CliError(EXIT_MALFORMED, f"bad bus spec: {exc}") from None
        h = kernel.create_bus(spec)
        print(json.dumps({"bus_id": h.bus_id, "path": spec.path,
                          "components": [{"name": c.name, "role": c.role, "pid": c.pid} for c in h.components]}, indent=2))
        if spec.backend == "memory":
            print("memory bus: serving until interrupted", flush=True)
            stop = _stop_on_signals()
            stop.wait()
            kernel.destroy_bus(h.bus_id)
        else:
            h.bus.close()
        return EXIT_OK
    if args.action == "list":
        for b in kernel.list_buses():
            live = sum(1 for c in b["components"] if c["alive"])
            print(f"{b['bus_id']}  {b['backend']}  {b['path']}  components={len(b['components'])} alive={live}")
        return EXIT_OK
    if args.action == "destroy":
        print(json.dumps(kernel.destroy_bus(args.bus_id)))
        return EXIT_OK
    raise CliError(EXIT_MALFORMED, f"unknown kernel action {args.action}")


# -- harness commands ---------------------------------------------------------------------


def cmd_harness(args) -> int:
    from .harness import crash_point_sweep, load_scenario, random_scenario, run_scenario

    if args.action == "run":
        try:
            sc = load_scenario(args.scenario)
        except (FileNotFoundError, yaml.YAMLError, ValueError, TypeError) as exc:
            raise CliError(EXIT_MALFORMED, f"bad scenario {args.scenario}: {exc}") from None
        report = run_scenario(sc, args.seed, workdir=args.workdir)
        for name, (ok, detail) in report.oracles.items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        m = report.metrics
        print(f"entries={report.entries} inferring={m.inferring_ms}ms voting={m.voting_ms}ms "
              f"deciding={m.deciding_ms}ms executing={m.executing_ms}ms")
        if args.report:
            Path(args.report).write_text(yaml.safe_dump(report.to_dict(), sort_keys=False))
        if args.csv:
            Path(args.csv).write_text(m.to_csv())
        return EXIT_OK if report.ok else EXIT_FAILED
    if args.action == "sweep":
        rep = crash_point_sweep(load_scenario(args.scenario), args.component, args.seed)
        print(rep.summary())
        return EXIT_OK if rep.ok else EXIT_FAILED
    if args.action == "random":
        failed = 0
        for seed in range(args.seed, args.seed + args.runs):
            r = run_scenario(random_scenario(seed), seed)
            if not r.ok:
                failed += 1
                print(f"FAIL seed={seed}: {[k for k, (ok, _) in r.oracles.items() if not ok]}")
        print(f"{args.runs} randomized runs, {failed} failed")
        return EXIT_OK if not failed else EXIT_FAILED
    raise CliError(EXIT_MALFORMED, f"unknown harness action {args.action}")


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logctl", description="Inspect and drive LogAct buses.")
    p.add_argument("--identity", help=f"identity file (YAML: client_id + role); default ${IDENTITY_ENV}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("tail", help="print entries")
    t.add_argument("bus", help="path of a durable bus file")
    t.add_argument("--types", help="comma-separated payload types, e.g. intent,commit")
    t.add_argument("--from", dest="start", type=int, default=0, help="first position")
    t.add_argument("--follow", action="store_true", help="keep polling for new entries")
    t.add_argument("--raw", action="store_true", help=f"do not truncate bodies at {SUMMARY_CHARS} chars")
    t.add_argument("--json", action="store_true", help="one JSON object per line")
    t.set_defaults(fn=cmd_tail)

    m = sub.add_parser("mail", help="append a Mail entry")
    m.add_argument("bus")
    m.add_argument("--body", required=True)
    m.add_argument("--sender")
    m.set_defaults(fn=cmd_mail)

    po = sub.add_parser("policy", help="append a Policy entry from a YAML document")
    po.add_argument("bus")
    po.add_argument("--file", required=True)
    po.set_defaults(fn=cmd_policy)

    r = sub.add_parser("run", help="run one component until signaled")
    r.add_argument("role", choices=["driver", "voter", "decider", "executor"])
    r.add_argument("--config", required=True)
    r.set_defaults(fn=cmd_run)

    i = sub.add_parser("identity", help="create identity files or register identities on a bus")
    i.add_argument("action", choices=["new", "add"])
    i.add_argument("--role", required=True)
    i.add_argument("--client-id")
    i.add_argument("--bus", help="bus file (for add)")
    i.add_argument("-o", "--output", help="write the identity file here (for new)")
    i.set_defaults(fn=cmd_identity)

    k = sub.add_parser("kernel", help="create, list and destroy buses")
    k.add_argument("action", choices=["create", "list", "destroy"])
    k.add_argument("bus_id", nargs="?")
    k.add_argument("--spec", help="bus spec file (for create)")
    k.add_argument("--root", default=os.environ.get("LOGCTL_KERNEL_ROOT", ".logact"), help="kernel state directory")
    k.set_defaults(fn=cmd_kernel)

    h = sub.add_parser("harness", help="run scenarios and sweeps")
    h.add_argument("action", choices=["run", "sweep", "random"])
    h.add_argument("scenario", nargs="?", default="hello-task")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--runs", type=int, default=100)
    h.add_argument("--component", default="decider")
    h.add_argument("--workdir")
    h.add_argument("--report", help="write the full report (YAML) here")
    h.add_argument("--csv", help="write per-stage spans (CSV) here")
    h.set_defaults(fn=cmd_harness)
    return p


def main(argv=None) -> int:
    from .kernel import DuplicateBusId, SpawnFailure, UnknownBusId

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "identity" and args.action == "add" and not args.bus:
        print("logctl: identity add needs --bus", file=sys.stderr)
        return EXIT_MALFORMED
    if args.command == "kernel":
        if args.action == "create" and not args.spec:
            print("logctl: kernel create needs --spec", file=sys.stderr)
            return EXIT_MALFORMED
        if args.action == "destroy" and not args.bus_id:
            print("logctl: kernel destroy needs a bus id", file=sys.stderr)
            return EXIT_MALFORMED
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"logctl: {exc}", file=sys.stderr)
        return exc.code
    except PermissionDenied as exc:
        print(f"logctl: permission denied: {exc}", file=sys.stderr)
        return EXIT_PERMISSION
    except (MalformedPolicy, MalformedPayload, CorruptLog) as exc:
        print(f"logctl: malformed: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (UnknownBus, UnknownBusId) as exc:
        print(f"logctl: unknown bus: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_BUS
    except DuplicateBusId as exc:
        print(f"logctl: bus id already exists: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except SpawnFailure as exc:
        print(f"logctl: spawn failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
