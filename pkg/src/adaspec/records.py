"""Per-step decode accounting records and the JSONL trace format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ArgumentError


@dataclass
class StepRecord:
    """Accounting for one draft-and-verify step."""

    index: int
    gamma: int                 # tokens drafted this step
    rounds: int                # pre-verification rounds (0 without a pre-verifier)
    accepted: int              # accepted draft tokens kept in the output
    draft_forwards: int
    target_forwards: int = 1
    preverify_forwards: int = 0
    emitted: list[int] = field(default_factory=list)
    emitted_count: int | None = None  # len(emitted) unless tokens were not kept

    def __post_init__(self):
        if self.accepted > self.gamma:
            raise ArgumentError("accepted count cannot exceed drafted count")
        if self.emitted_count is None:
            self.emitted_count = len(self.emitted)


def write_trace(path: str | Path, records: list[StepRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_trace(path: str | Path) -> list[StepRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(StepRecord(**json.loads(line)))
    return records
