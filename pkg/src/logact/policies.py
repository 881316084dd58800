"""Policy documents and the decider's quorum evaluation.

Policy document schema (YAML or JSON; ``v`` defaults to 1)::

    {v: 1, kind: decider, expr: on_by_default}
    {v: 1, kind: decider, expr: first_voter}
    {v: 1, kind: decider, expr: or,        types: [rule, llm]}
    {v: 1, kind: decider, expr: and,       types: [rule, llm]}
    {v: 1, kind: decider, expr: threshold, k: 2, types: [a, b, c]}
    {v: 1, kind: voter, target: rule, body: {...}}
    {v: 1, kind: driver_election, candidate: driver-2, epoch: 3}

``boolean_or`` / ``boolean_and`` are accepted as spellings of ``or`` / ``and``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence, Union

import yaml

from .entries import APPROVE, REJECT, LogActError, Policy, Vote

COMMIT = "commit"
ABORT = "abort"
UNDECIDED = "undecided"

SCHEMA_VERSION = 1


class MalformedPolicy(LogActError):
    pass


@dataclass(frozen=True)
class OnByDefault:
    pass


@dataclass(frozen=True)
class FirstVoter:
    pass


def _check_types(types: tuple[str, ...], what: str) -> None:
    if not types:
        raise ValueError(f"{what} needs at least one voter type")
    if len(set(types)) != len(types):
        raise ValueError(f"{what} lists a voter type twice")


@dataclass(frozen=True)
class AnyOf:
    """boolean_OR over voter types."""

    types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        _check_types(self.types, "or")


@dataclass(frozen=True)
class AllOf:
    """boolean_AND over voter types."""

    types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        _check_types(self.types, "and")


@dataclass(frozen=True)
class Threshold:
    k: int
    types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        _check_types(self.types, "threshold")
        if not (1 <= self.k <= len(self.types)):
            raise ValueError(f"threshold k={self.k} must be in 1..{len(self.types)}")


DeciderPolicy = Union[OnByDefault, FirstVoter, AnyOf, AllOf, Threshold]


@dataclass(frozen=True)
class VoterPolicy:
    target_voter_type: str
    body: dict = field(hash=False)

    def __post_init__(self):
        if not self.target_voter_type:
            raise ValueError("voter policy needs a target voter type")


@dataclass(frozen=True)
class DriverElection:
    candidate: str
    epoch: int


def first_votes(votes: Iterable[Vote]) -> dict[str, str]:
    """First verdict per voter type; later votes of a type are ignored."""
    seen: dict[str, str] = {}
    for v in votes:
        seen.setdefault(v.voter_type, v.verdict)
    return seen


def evaluate(policy: DeciderPolicy, votes: Sequence[Vote]) -> str:
    if isinstance(policy, OnByDefault):
        return COMMIT
    if isinstance(policy, FirstVoter):
        if not votes:
            return UNDECIDED
        return COMMIT if votes[0].verdict == APPROVE else ABORT

    verdicts = first_votes(votes)
    listed = [verdicts.get(t) for t in policy.types]
    approves = listed.count(APPROVE)
    rejects = listed.count(REJECT)
    n = len(policy.types)
    if isinstance(policy, AnyOf):
        need = 1
    elif isinstance(policy, AllOf):
        need = n
    elif isinstance(policy, Threshold):
        need = policy.k
    else:
        raise TypeError(f"not a decider policy: {policy!r}")
    if approves >= need:
        return COMMIT
    if n - rejects < need:
        return ABORT
    return UNDECIDED


# -- documents -------------------------------------------------------------------

_EXPR_ALIASES = {
    "on_by_default": "on_by_default",
    "first_voter": "first_voter",
    "or": "or",
    "boolean_or": "or",
    "and": "and",
    "boolean_and": "and",
    "threshold": "threshold",
}


def _load(document: Any) -> dict:
    if isinstance(document, (bytes, str)):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise MalformedPolicy(f"unparseable policy document: {exc}") from exc
    if not isinstance(document, dict):
        raise MalformedPolicy(f"policy document must be a mapping, got {type(document).__name__}")
    return document


def parse_policy(document: Any) -> Union[DeciderPolicy, VoterPolicy, DriverElection]:
    doc = _load(document)
    version = doc.get("v", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise MalformedPolicy(f"unsupported policy schema version {version!r}")
    kind = doc.get("kind")
    try:
        if kind == "decider":
            expr = _EXPR_ALIASES.get(str(doc.get("expr", "")).lower())
            if expr is None:
                raise MalformedPolicy(f"unknown decider expression {doc.get('expr')!r}")
            if expr == "on_by_default":
                return OnByDefault()
            if expr == "first_voter":
                return FirstVoter()
            types = doc.get("types")
            if not isinstance(types, list) or not all(isinstance(t, str) for t in types):
                raise MalformedPolicy("decider expression needs a list of voter types")
            if expr == "or":
                return AnyOf(tuple(types))
            if expr == "and":
                return AllOf(tuple(types))
            k = doc.get("k")
            if not isinstance(k, int) or isinstance(k, bool):
                raise MalformedPolicy("threshold needs an integer k")
            return Threshold(k, tuple(types))
        if kind == "voter":
            target = doc.get("target")
            body = doc.get("body", {})
            if not isinstance(target, str) or not isinstance(body, dict):
                raise MalformedPolicy("voter policy needs a target type and a mapping body")
            return VoterPolicy(target, body)
        if kind == "driver_election":
            candidate, epoch = doc.get("candidate"), doc.get("epoch")
            if not isinstance(candidate, str) or not isinstance(epoch, int) or epoch < 0:
                raise MalformedPolicy("driver election needs a candidate id and a non-negative epoch")
            return DriverElection(candidate, epoch)
    except ValueError as exc:
        raise MalformedPolicy(str(exc)) from exc
    raise MalformedPolicy(f"unknown policy kind {kind!r}")


def policy_document(policy) -> dict:
    if isinstance(policy, OnByDefault):
        return {"v": SCHEMA_VERSION, "kind": "decider", "expr": "on_by_default"}
    if isinstance(policy, FirstVoter):
        return {"v": SCHEMA_VERSION, "kind": "decider", "expr": "first_voter"}
    if isinstance(policy, AnyOf):
        return {"v": SCHEMA_VERSION, "kind": "decider", "expr": "or", "types": list(policy.types)}
    if isinstance(policy, AllOf):
        return {"v": SCHEMA_VERSION, "kind": "decider", "expr": "and", "types": list(policy.types)}
    if isinstance(policy, Threshold):
        return {"v": SCHEMA_VERSION, "kind": "decider", "expr": "threshold", "k": policy.k, "types": list(policy.types)}
    if isinstance(policy, VoterPolicy):
        return {"v": SCHEMA_VERSION, "kind": "voter", "target": policy.target_voter_type, "body": policy.body}
    if isinstance(policy, DriverElection):
        return {"v": SCHEMA_VERSION, "kind": "driver_election", "candidate": policy.candidate, "epoch": policy.epoch}
    raise TypeError(f"not a policy: {policy!r}")


def policy_kind(policy) -> str:
    if isinstance(policy, VoterPolicy):
        return "voter"
    if isinstance(policy, DriverElection):
        return "driver_election"
    return "decider"


def policy_payload(policy, issuer: str) -> Policy:
    return Policy(policy_kind(policy), issuer, policy_document(policy))


def payload_policy(payload: Policy):
    """Parse the document carried by a Policy entry; the entry's kind must agree."""
    parsed = parse_policy(payload.body)
    if policy_kind(parsed) != payload.kind:
        raise MalformedPolicy(f"policy entry kind {payload.kind!r} disagrees with its document")
    return parsed
