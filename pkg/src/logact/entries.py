"""Typed entries, payload bodies, access-control identities and their wire encoding.

Every payload is encoded as canonical JSON (sorted keys, compact separators,
UTF-8).  The same bytes are stored by the in-memory and durable backends, so a
payload read back from either is equal to the one appended.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Union


class LogActError(Exception):
    """Base class for errors raised by the runtime."""


class PermissionDenied(LogActError):
    pass


class BusClosed(LogActError):
    pass


class InvalidRange(LogActError):
    pass


class MalformedPayload(LogActError):
    pass


class PayloadType(str, Enum):
    INF_IN = "InfIn"
    INF_OUT = "InfOut"
    INTENT = "Intent"
    VOTE = "Vote"
    COMMIT = "Commit"
    ABORT = "Abort"
    RESULT = "Result"
    MAIL = "Mail"
    POLICY = "Policy"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "PayloadType":
        for t in cls:
            if t.value.lower() == name.strip().lower():
                return t
        raise ValueError(f"unknown payload type: {name!r}")


# On-disk tags; never renumber.
TYPE_TAGS: dict[PayloadType, int] = {
    PayloadType.INF_IN: 1,
    PayloadType.INF_OUT: 2,
    PayloadType.INTENT: 3,
    PayloadType.VOTE: 4,
    PayloadType.COMMIT: 5,
    PayloadType.ABORT: 6,
    PayloadType.RESULT: 7,
    PayloadType.MAIL: 8,
    PayloadType.POLICY: 9,
}
TAG_TYPES: dict[int, PayloadType] = {v: k for k, v in TYPE_TAGS.items()}

ALL_TYPES = frozenset(PayloadType)

APPROVE = "approve"
REJECT = "reject"

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_RECOVERY = "recovery"


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant | tool
    content: str


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # shell | builtin
    body: str
    workdir: str = "."

    def __post_init__(self):
        if self.kind not in ("shell", "builtin"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if not self.body.strip():
            raise ValueError("action body must be non-empty")


@dataclass(frozen=True)
class InfIn:
    delta: tuple[Message, ...]
    epoch: int = 0


@dataclass(frozen=True)
class InfOut:
    text: str
    intent_extracted: bool
    epoch: int = 0


@dataclass(frozen=True)
class Intent:
    action: ActionSpec
    driver_epoch: int
    turn: int


@dataclass(frozen=True)
class Vote:
    intent_position: int
    voter_type: str
    voter_id: str
    verdict: str
    rationale: str = ""

    def __post_init__(self):
        if self.verdict not in (APPROVE, REJECT):
            raise ValueError(f"bad verdict {self.verdict!r}")


@dataclass(frozen=True)
class Commit:
    intent_position: int


@dataclass(frozen=True)
class Abort:
    intent_position: int
    reason: str = ""


@dataclass(frozen=True)
class Result:
    intent_position: Optional[int]
    status: str
    output: str = ""
    # recovery only: committed intents the rebooted executor will never run
    in_doubt: tuple[int, ...] = ()

    def __post_init__(self):
        if self.status not in (STATUS_OK, STATUS_ERROR, STATUS_RECOVERY):
            raise ValueError(f"bad result status {self.status!r}")
        if self.status == STATUS_RECOVERY and self.intent_position is not None:
            raise ValueError("recovery results carry no intent position")


@dataclass(frozen=True)
class Mail:
    sender: str
    body: str


@dataclass(frozen=True)
class Policy:
    kind: str  # decider | voter | driver_election
    issuer: str
    body: dict = field(hash=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"bad policy kind {self.kind!r}")


POLICY_KINDS = ("decider", "voter", "driver_election")

Payload = Union[InfIn, InfOut, Intent, Vote, Commit, Abort, Result, Mail, Policy]

_CLASS_TYPES: dict[type, PayloadType] = {
    InfIn: PayloadType.INF_IN,
    InfOut: PayloadType.INF_OUT,
    Intent: PayloadType.INTENT,
    Vote: PayloadType.VOTE,
    Commit: PayloadType.COMMIT,
    Abort: PayloadType.ABORT,
    Result: PayloadType.RESULT,
    Mail: PayloadType.MAIL,
    Policy: PayloadType.POLICY,
}


def payload_type(payload: Payload) -> PayloadType:
    try:
        return _CLASS_TYPES[type(payload)]
    except KeyError:
        raise TypeError(f"not a payload: {payload!r}") from None


@dataclass(frozen=True)
class Entry:
    position: int
    realtime_ts: int
    payload: Payload

    @property
    def type(self) -> PayloadType:
        return payload_type(self.payload)


# -- encoding -----------------------------------------------------------------


def _body_of(payload: Payload) -> dict[str, Any]:
    if isinstance(payload, InfIn):
        return {
            "delta": [{"role": m.role, "content": m.content} for m in payload.delta],
            "epoch": payload.epoch,
        }
    if isinstance(payload, InfOut):
        return {"text": payload.text, "intent_extracted": payload.intent_extracted, "epoch": payload.epoch}
    if isinstance(payload, Intent):
        a = payload.action
        return {
            "action": {"kind": a.kind, "body": a.body, "workdir": a.workdir},
            "driver_epoch": payload.driver_epoch,
            "turn": payload.turn,
        }
    if isinstance(payload, Vote):
        return {
            "intent_position": payload.intent_position,
            "voter_type": payload.voter_type,
            "voter_id": payload.voter_id,
            "verdict": payload.verdict,
            "rationale": payload.rationale,
        }
    if isinstance(payload, Commit):
        return {"intent_position": payload.intent_position}
    if isinstance(payload, Abort):
        return {"intent_position": payload.intent_position, "reason": payload.reason}
    if isinstance(payload, Result):
        body: dict[str, Any] = {
            "intent_position": payload.intent_position,
            "status": payload.status,
            "output": payload.output,
        }
        if payload.in_doubt:
            body["in_doubt"] = list(payload.in_doubt)
        return body
    if isinstance(payload, Mail):
        return {"sender": payload.sender, "body": payload.body}
    if isinstance(payload, Policy):
        return {"kind": payload.kind, "issuer": payload.issuer, "body": payload.body}
    raise TypeError(f"not a payload: {payload!r}")


def canonical_json(doc: Any) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_payload(payload: Payload) -> bytes:
    return canonical_json(_body_of(payload))


def decode_payload(ptype: PayloadType, data: bytes) -> Payload:
    try:
        b = json.loads(data.decode("utf-8"))
        if ptype is PayloadType.INF_IN:
            return InfIn(tuple(Message(m["role"], m["content"]) for m in b["delta"]), b.get("epoch", 0))
        if ptype is PayloadType.INF_OUT:
            return InfOut(b["text"], bool(b["intent_extracted"]), b.get("epoch", 0))
        if ptype is PayloadType.INTENT:
            a = b["action"]
            return Intent(ActionSpec(a["kind"], a["body"], a.get("workdir", ".")), b["driver_epoch"], b["turn"])
        if ptype is PayloadType.VOTE:
            return Vote(b["intent_position"], b["voter_type"], b["voter_id"], b["verdict"], b.get("rationale", ""))
        if ptype is PayloadType.COMMIT:
            return Commit(b["intent_position"])
        if ptype is PayloadType.ABORT:
            return Abort(b["intent_position"], b.get("reason", ""))
        if ptype is PayloadType.RESULT:
            return Result(b["intent_position"], b["status"], b.get("output", ""), tuple(b.get("in_doubt", ())))
        if ptype is PayloadType.MAIL:
            return Mail(b["sender"], b["body"])
        if ptype is PayloadType.POLICY:
            return Policy(b["kind"], b["issuer"], b["body"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedPayload(f"cannot decode {ptype} payload: {exc}") from exc
    raise MalformedPayload(f"unknown payload type {ptype!r}")


def entry_document(entry: Entry) -> dict[str, Any]:
    """Self-describing form of an entry: type tag, timestamp and body."""
    return {
        "position": entry.position,
        "realtime_ts": entry.realtime_ts,
        "type": entry.type.value,
        "body": _body_of(entry.payload),
    }


# -- identities -----------------------------------------------------------------


def _types(items) -> frozenset[PayloadType]:
    return frozenset(t if isinstance(t, PayloadType) else PayloadType.parse(t) for t in items)


@dataclass(frozen=True)
class Permissions:
    appendable: frozenset[PayloadType] = frozenset()
    readable: frozenset[PayloadType] = frozenset()
    pollable: frozenset[PayloadType] = frozenset()
    # Policy kinds this client may append; None means any kind.
    policy_kinds: Optional[frozenset[str]] = None

    def __post_init__(self):
        object.__setattr__(self, "appendable", _types(self.appendable))
        object.__setattr__(self, "readable", _types(self.readable))
        object.__setattr__(self, "pollable", _types(self.pollable))
        if self.policy_kinds is not None:
            object.__setattr__(self, "policy_kinds", frozenset(self.policy_kinds))
        if not self.pollable <= self.readable:
            raise ValueError("pollable types must be a subset of readable types")

    def may_append(self, payload: Payload) -> bool:
        t = payload_type(payload)
        if t not in self.appendable:
            return False
        if t is PayloadType.POLICY and self.policy_kinds is not None:
            return payload.kind in self.policy_kinds
        return True

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "appendable": sorted(t.value for t in self.appendable),
            "readable": sorted(t.value for t in self.readable),
            "pollable": sorted(t.value for t in self.pollable),
        }
        if self.policy_kinds is not None:
            d["policy_kinds"] = sorted(self.policy_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Permissions":
        kinds = d.get("policy_kinds")
        return cls(
            frozenset(d.get("appendable", ())),
            frozenset(d.get("readable", ())),
            frozenset(d.get("pollable", ())),
            frozenset(kinds) if kinds is not None else None,
        )


@dataclass(frozen=True)
class ClientIdentity:
    client_id: str
    permissions: Permissions

    def to_dict(self) -> dict[str, Any]:
        return {"client_id": self.client_id, **self.permissions.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClientIdentity":
        if "role" in d and not any(k in d for k in ("appendable", "readable", "pollable")):
            return role_identity(d["role"], d.get("client_id"))
        return cls(d["client_id"], Permissions.from_dict(d))


T = PayloadType

# Appended-by / played-by rows per role.  Readable additionally covers the
# role's own output types so an instance can rebuild its state by replay.
ROLE_PERMISSIONS: dict[str, Permissions] = {
    "driver": Permissions(
        appendable=frozenset({T.INF_IN, T.INF_OUT, T.INTENT, T.POLICY}),
        readable=frozenset({T.MAIL, T.INF_IN, T.INF_OUT, T.INTENT, T.ABORT, T.RESULT, T.POLICY}),
        pollable=frozenset({T.MAIL, T.INF_OUT, T.ABORT, T.RESULT, T.POLICY}),
        policy_kinds=frozenset({"driver_election"}),
    ),
    "voter": Permissions(
        appendable=frozenset({T.VOTE}),
        readable=frozenset({T.INTENT, T.VOTE, T.INF_OUT, T.POLICY}),
        pollable=frozenset({T.INTENT, T.VOTE, T.POLICY}),
    ),
    "decider": Permissions(
        appendable=frozenset({T.COMMIT, T.ABORT}),
        readable=frozenset({T.INTENT, T.VOTE, T.POLICY, T.COMMIT, T.ABORT}),
        pollable=frozenset({T.INTENT, T.VOTE, T.POLICY}),
    ),
    "executor": Permissions(
        appendable=frozenset({T.RESULT}),
        readable=frozenset({T.INTENT, T.COMMIT, T.RESULT, T.POLICY}),
        pollable=frozenset({T.COMMIT, T.POLICY}),
    ),
    "user": Permissions(
        appendable=frozenset({T.MAIL}),
        readable=frozenset({T.MAIL, T.INF_OUT, T.RESULT, T.ABORT}),
        pollable=frozenset({T.MAIL, T.INF_OUT, T.RESULT, T.ABORT}),
    ),
    "admin": Permissions(
        appendable=frozenset({T.MAIL, T.POLICY}),
        readable=ALL_TYPES,
        pollable=ALL_TYPES,
    ),
    "auditor": Permissions(readable=ALL_TYPES, pollable=ALL_TYPES),
}


def role_identity(role: str, client_id: Optional[str] = None) -> ClientIdentity:
    try:
        perms = ROLE_PERMISSIONS[role]
    except KeyError:
        raise ValueError(f"unknown role {role!r}; expected one of {sorted(ROLE_PERMISSIONS)}") from None
    return ClientIdentity(client_id or role, perms)


def payload_body(payload: Payload) -> dict[str, Any]:
    return _body_of(payload)
