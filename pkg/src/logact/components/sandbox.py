"""Running actions inside an executor's sandbox directory.

Shell actions run through ``/bin/sh`` with the working directory jailed under
the sandbox root.  Builtins are small in-process tools; their body is
``name arg1 arg2 ...`` split with shell quoting rules.
"""

from __future__ import annotations

import hashlib
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..entries import STATUS_ERROR, STATUS_OK, ActionSpec, LogActError, PayloadType, PermissionDenied


class SandboxViolation(LogActError):
    pass


class BuiltinError(LogActError):
    pass


def resolve_in_sandbox(root: Path, relative: str) -> Path:
    root = root.resolve()
    target = (root / relative).resolve()
    if target != root and not target.is_relative_to(root):
        raise SandboxViolation(f"path {relative!r} escapes the sandbox")
    return target


@dataclass
class ExecContext:
    root: Path
    workdir: Path
    intent_position: int
    client: object = None  # the executor's own bus client
    on_progress: Optional[Callable[[int, int], None]] = None
    notes: list[str] = field(default_factory=list)

    def path(self, rel: str) -> Path:
        root = self.root.resolve()
        target = (self.workdir / rel).resolve()
        if target != root and not target.is_relative_to(root):
            raise SandboxViolation(f"path {rel!r} escapes the sandbox")
        return target

    def progress(self, item: int) -> None:
        if self.on_progress is not None:
            self.on_progress(self.intent_position, item)


def _rel(ctx: ExecContext, p: Path) -> str:
    return str(p.relative_to(ctx.root.resolve()))


def b_echo(ctx, *words):
    return " ".join(words)


def b_write_file(ctx, path, *words):
    p = ctx.path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    text = " ".join(words) + "\n"
    p.write_text(text)
    return f"wrote {_rel(ctx, p)} ({len(text)} bytes)"


def b_append_file(ctx, path, *words):
    p = ctx.path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "a") as f:
        f.write(" ".join(words) + "\n")
    return f"appended to {_rel(ctx, p)}"


def b_read_file(ctx, path):
    p = ctx.path(path)
    if not p.is_file():
        raise BuiltinError(f"no such file: {path}")
    return p.read_text()


def b_delete_file(ctx, path):
    p = ctx.path(path)
    if not p.exists():
        return f"{path} already absent"
    p.unlink()
    return f"deleted {_rel(ctx, p)}"


def b_list_dir(ctx, path="."):
    p = ctx.path(path)
    if not p.is_dir():
        raise BuiltinError(f"no such directory: {path}")
    return "\n".join(sorted(c.name + ("/" if c.is_dir() else "") for c in p.iterdir()))


def b_count_lines(ctx, path):
    p = ctx.path(path)
    n = len(p.read_text().splitlines()) if p.is_file() else 0
    return f"Found {n} existing lines in {path}"


def item_name(i: int) -> str:
    return f"item_{i:03d}"


def b_process_items(ctx, start, end, data_dir="data", out="checksums.txt"):
    """Checksum data/<item>/ for items start..end, one output line per item."""
    start, end = int(start), int(end)
    out_path = ctx.path(out)
    counters = ctx.path("counters")
    counters.mkdir(exist_ok=True)
    done = 0
    for i in range(start, end + 1):
        folder = ctx.path(f"{data_dir}/{item_name(i)}")
        h = hashlib.sha256()
        if folder.is_dir():
            for f in sorted(folder.iterdir()):
                h.update(f.name.encode())
                h.update(f.read_bytes())
        with open(out_path, "a") as fh:
            fh.write(f"{item_name(i)} {h.hexdigest()[:16]}\n")
        with open(counters / item_name(i), "a") as fh:
            fh.write("x")
        done += 1
        ctx.progress(i)
    return f"processed {done} items ({start}..{end})"


def b_forge(ctx, type_name, *words):
    """Try to append an arbitrary entry type through the executor's own identity."""
    from ..entries import Abort, Commit, Mail, Policy, Vote

    t = PayloadType.parse(type_name)
    fake = {
        PayloadType.VOTE: lambda: Vote(ctx.intent_position, "rule", "forged", "approve", "forged"),
        PayloadType.COMMIT: lambda: Commit(ctx.intent_position),
        PayloadType.ABORT: lambda: Abort(ctx.intent_position, "forged"),
        PayloadType.POLICY: lambda: Policy("decider", "forged", {"v": 1, "kind": "decider", "expr": "on_by_default"}),
        PayloadType.MAIL: lambda: Mail("forged", " ".join(words)),
    }.get(t)
    if fake is None or ctx.client is None:
        raise BuiltinError(f"cannot forge {type_name}")
    try:
        pos = ctx.client.append(fake())
    except PermissionDenied as exc:
        raise BuiltinError(f"permission denied: {exc}") from exc
    return f"forged {t} at {pos}"


BUILTINS: dict[str, Callable] = {
    "echo": b_echo,
    "write_file": b_write_file,
    "append_file": b_append_file,
    "read_file": b_read_file,
    "delete_file": b_delete_file,
    "list_dir": b_list_dir,
    "count_lines": b_count_lines,
    "process_items": b_process_items,
    "forge": b_forge,
}


def run_action(
    action: ActionSpec,
    root: Path,
    intent_position: int,
    builtins: Optional[dict[str, Callable]] = None,
    timeout: float = 60.0,
    client=None,
    on_progress=None,
) -> tuple[str, str]:
    """Execute ``action``; returns (status, output).  Jail violations do not run."""
    root = Path(root)
    try:
        workdir = resolve_in_sandbox(root, action.workdir)
    except SandboxViolation as exc:
        return STATUS_ERROR, f"sandbox violation: {exc}"
    if not workdir.is_dir():
        return STATUS_ERROR, f"workdir {action.workdir!r} does not exist"
    if action.kind == "shell":
        try:
            proc = subprocess.run(
                action.body, shell=True, cwd=workdir, capture_output=True, text=True, timeout=timeout
            )
        except subprocess.TimeoutExpired as exc:
            return STATUS_ERROR, f"timed out after {timeout}s\n{exc.stdout or ''}"
        output = proc.stdout + proc.stderr + f"exit status {proc.returncode}"
        return (STATUS_OK if proc.returncode == 0 else STATUS_ERROR), output
    table = BUILTINS if builtins is None else builtins
    try:
        name, *args = shlex.split(action.body)
    except ValueError as exc:
        return STATUS_ERROR, f"cannot parse builtin: {exc}"
    fn = table.get(name)
    if fn is None:
        return STATUS_ERROR, f"unknown builtin {name!r}"
    ctx = ExecContext(root, workdir, intent_position, client, on_progress)
    try:
        return STATUS_OK, fn(ctx, *args)
    except (BuiltinError, SandboxViolation, OSError, TypeError, ValueError) as exc:
        return STATUS_ERROR, f"{name} failed: {exc}"
