"""Per-stage durations and byte accounting derived from entry timestamps."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..entries import Abort, Commit, Entry, InfIn, InfOut, Intent, PayloadType, Result, Vote

STAGES = ("inferring", "voting", "deciding", "executing")


@dataclass
class StageMetrics:
    inferring_ms: int = 0
    voting_ms: int = 0
    deciding_ms: int = 0
    executing_ms: int = 0
    bytes_by_type: dict[str, int] = field(default_factory=dict)
    count_by_type: dict[str, int] = field(default_factory=dict)
    # (stage, start position, end position, duration ms)
    spans: list[tuple[str, int, int, int]] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_type.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spans"] = [list(s) for s in self.spans]
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "start_position", "end_position", "duration_ms"])
        for row in self.spans:
            w.writerow(row)
        return buf.getvalue()


def stage_metrics(entries: Sequence[Entry], payload_bytes: dict[PayloadType, int] | None = None) -> StageMetrics:
    """Stage spans, walking the log once.

    inferring: InfIn to the next InfOut.  voting: Intent to its last vote
    before the decision (zero without votes).  deciding: that point to the
    Commit or Abort.  executing: first Commit to the Result.
    """
    m = StageMetrics()
    for e in entries:
        m.count_by_type[e.type.value] = m.count_by_type.get(e.type.value, 0) + 1
    if payload_bytes is not None:
        m.bytes_by_type = {t.value: n for t, n in payload_bytes.items() if n}

    infer_start = None
    intents: dict[int, Entry] = {}
    last_vote: dict[int, Entry] = {}
    committed_at: dict[int, Entry] = {}
    decided: set[int] = set()
    for e in entries:
        p = e.payload
        if isinstance(p, InfIn):
            if infer_start is None:
                infer_start = e
        elif isinstance(p, InfOut) and infer_start is not None:
            _span(m, "inferring", infer_start, e)
            infer_start = None
        elif isinstance(p, Intent):
            intents[e.position] = e
        elif isinstance(p, Vote) and p.intent_position in intents and p.intent_position not in decided:
            last_vote[p.intent_position] = e
        elif isinstance(p, (Commit, Abort)) and p.intent_position in intents and p.intent_position not in decided:
            decided.add(p.intent_position)
            start = intents[p.intent_position]
            mid = last_vote.get(p.intent_position, start)
            _span(m, "voting", start, mid)
            _span(m, "deciding", mid, e)
            if isinstance(p, Commit):
                committed_at[p.intent_position] = e
        elif isinstance(p, Result) and p.intent_position in committed_at:
            _span(m, "executing", committed_at.pop(p.intent_position), e)
    return m


def _span(m: StageMetrics, stage: str, a: Entry, b: Entry) -> None:
    d = max(0, b.realtime_ts - a.realtime_ts)
    setattr(m, f"{stage}_ms", getattr(m, f"{stage}_ms") + d)
    m.spans.append((stage, a.position, b.position, d))
