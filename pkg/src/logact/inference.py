"""Inference adapters, intent extraction and conversation deltas.

An inference output proposes at most one action, written as a fenced block
tagged ``action`` holding a small YAML mapping::

    ```action
    kind: shell
    workdir: .
    body: echo hi > hello.txt
    ```

Only the first block counts.  Text without a block ends the turn.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import yaml

from .clock import RealClock
from .entries import ActionSpec, LogActError, Message

log = logging.getLogger(__name__)

TASK_COMPLETE = "TASK COMPLETE"

Conversation = Sequence[Message]


class AdapterUnavailable(LogActError):
    pass


class NotAPrefix(LogActError):
    pass


class MalformedActionBlock(LogActError):
    pass


# -- action blocks -------------------------------------------------------------

_FENCE_OPEN = re.compile(r"^```action[ \t]*$", re.MULTILINE)
_BLOCK = re.compile(r"^```action[ \t]*\n(.*?)^```[ \t]*$", re.MULTILINE | re.DOTALL)


def action_block(action: ActionSpec) -> str:
    doc = {"kind": action.kind, "workdir": action.workdir, "body": action.body}
    # non-ASCII is escaped: raw NEL or U+2028 would read back as a line break
    return "```action\n" + yaml.safe_dump(doc, sort_keys=False, allow_unicode=False, width=10_000) + "```"


_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)


@functools.lru_cache(maxsize=4096)
def parse_action_block(text: str) -> Optional[ActionSpec]:
    """Strict parse: returns None without a block, raises on a malformed first block."""
    opening = _FENCE_OPEN.search(text)
    if opening is None:
        return None
    m = _BLOCK.search(text, opening.start())
    if m is None or m.start() != opening.start():
        raise MalformedActionBlock("action fence is never closed")
    try:
        doc = yaml.load(m.group(1), Loader=_Loader)
    except yaml.YAMLError as exc:
        raise MalformedActionBlock(f"action block is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or "body" not in doc:
        raise MalformedActionBlock("action block needs at least a body field")
    try:
        return ActionSpec(str(doc.get("kind", "shell")), str(doc["body"]), str(doc.get("workdir", ".")))
    except ValueError as exc:
        raise MalformedActionBlock(str(exc)) from exc


@dataclass
class Extraction:
    action: Optional[ActionSpec]
    warnings: list[str] = field(default_factory=list)


def extract(text: str) -> Extraction:
    warnings = []
    try:
        action = parse_action_block(text)
    except MalformedActionBlock as exc:
        return Extraction(None, [f"malformed action block ignored: {exc}"])
    if action is not None and len(_FENCE_OPEN.findall(text)) > 1:
        warnings.append("more than one action block; only the first is used")
    return Extraction(action, warnings)


def extract_intent(text: str) -> Optional[ActionSpec]:
    ex = extract(text)
    for w in ex.warnings:
        log.warning(w)
    return ex.action


# -- deltas ----------------------------------------------------------------------


def delta_of(prev: Conversation, next: Conversation) -> list[Message]:
    if len(prev) > len(next) or list(next[: len(prev)]) != list(prev):
        raise NotAPrefix("previous conversation is not a prefix of the next one")
    return list(next[len(prev):])


def fold_deltas(deltas: Sequence[Sequence[Message]]) -> list[Message]:
    out: list[Message] = []
    for d in deltas:
        out.extend(d)
    return out


# -- adapters ----------------------------------------------------------------------


def latest_input(conversation: Conversation) -> str:
    for m in reversed(conversation):
        if m.role in ("user", "tool"):
            return m.content
    return conversation[-1].content if conversation else ""


Responder = Union[str, Callable[[Conversation, "re.Match | None"], str]]


@dataclass
class ScriptedRule:
    """``match`` is a substring (or regex with ``regex=True``) tested against the
    latest user/tool message; ``respond`` is a template or a callable."""

    match: Union[str, Callable[[str], bool]]
    respond: Responder
    regex: bool = False

    def test(self, text: str):
        if callable(self.match):
            return self.match(text) or None
        if self.regex:
            return re.search(self.match, text, re.DOTALL)
        return self.match in text or None

    def render(self, conversation: Conversation, hit) -> str:
        if callable(self.respond):
            return self.respond(conversation, hit if isinstance(hit, re.Match) else None)
        if isinstance(hit, re.Match):
            return self.respond.format(*hit.groups(), **hit.groupdict(), latest=latest_input(conversation))
        return self.respond


class ScriptedAdapter:
    """Deterministic stand-in for a model: first matching rule answers."""

    def __init__(self, rules: Sequence[ScriptedRule], default: str = TASK_COMPLETE, delay_s: float = 0.0, clock=None):
        self.rules = list(rules)
        self.default = default
        self.delay_s = delay_s
        self.clock = clock or RealClock()
        self.calls = 0

    def infer(self, conversation: Conversation) -> str:
        if not conversation:
            raise ValueError("conversation must be non-empty")
        self.calls += 1
        if self.delay_s:
            self.clock.sleep(self.delay_s)
        text = latest_input(conversation)
        for rule in self.rules:
            hit = rule.test(text)
            if hit:
                return rule.render(conversation, hit)
        return self.default


class EchoAdapter:
    def __init__(self):
        self.calls = 0

    def infer(self, conversation: Conversation) -> str:
        if not conversation:
            raise ValueError("conversation must be non-empty")
        self.calls += 1
        return f"echo: {latest_input(conversation)}\n{TASK_COMPLETE}"


class HttpAdapter:
    """Chat-completions style client; sends the full history on every call."""

    def __init__(self, endpoint: str, model: str, token_env: Optional[str] = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.calls = 0

    def infer(self, conversation: Conversation) -> str:
        if not conversation:
            raise ValueError("conversation must be non-empty")
        self.calls += 1
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in conversation],
        }).encode()
        headers = {"Content-Type": "application/json"}
        if self.token_env and os.environ.get(self.token_env):
            headers["Authorization"] = f"Bearer {os.environ[self.token_env]}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise AdapterUnavailable(f"inference request to {self.endpoint} failed: {exc}") from exc
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise AdapterUnavailable(f"unexpected inference response shape: {exc}") from exc


def rules_from_documents(docs: Sequence[dict]) -> list[ScriptedRule]:
    rules = []
    for d in docs:
        if "match" not in d or "respond" not in d:
            raise ValueError(f"scripted rule needs match and respond: {d!r}")
        respond = d["respond"]
        if isinstance(respond, dict):  # {text: ..., action: {kind, body, workdir}}
            text = respond.get("text", "")
            if "action" in respond:
                a = respond["action"]
                text = (text + "\n" if text else "") + action_block(ActionSpec(a.get("kind", "shell"), a["body"], a.get("workdir", ".")))
            respond = text
        rules.append(ScriptedRule(d["match"], respond, bool(d.get("regex", False))))
    return rules


def load_adapter(config: dict, clock=None):
    """Build an adapter from a config mapping (``kind``: scripted | echo | http)."""
    kind = config.get("kind", "scripted")
    if kind == "echo":
        return EchoAdapter()
    if kind == "http":
        return HttpAdapter(config["endpoint"], config["model"], config.get("token_env"), float(config.get("timeout", 60)))
    if kind == "scripted":
        docs = config.get("rules")
        if docs is None and "rules_file" in config:
            with open(config["rules_file"]) as f:
                loaded = yaml.safe_load(f)
            docs = loaded.get("rules", loaded) if isinstance(loaded, dict) else loaded
            config = {**(loaded if isinstance(loaded, dict) else {}), **config}
        return ScriptedAdapter(
            rules_from_documents(docs or []),
            default=config.get("default", TASK_COMPLETE),
            delay_s=float(config.get("delay_s", 0.0)),
            clock=clock,
        )
    raise ValueError(f"unknown inference adapter kind {kind!r}")
