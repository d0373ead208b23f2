"""Character-level tokenizer over a corpus byte alphabet.

Draft and target models share one vocabulary, so a single ByteVocab built
from the training corpus serves every model in a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ArgumentError


@dataclass(frozen=True)
class ByteVocab:
    """Maps each byte value that occurs in the corpus to a dense token id."""

    alphabet: tuple[int, ...]  # sorted byte values; index == token id

    def __post_init__(self):
        if len(self.alphabet) < 2:
            raise ArgumentError("vocabulary needs at least 2 symbols")
        if list(self.alphabet) != sorted(set(self.alphabet)):
            raise ArgumentError("alphabet must be sorted and duplicate-free")

    @property
    def size(self) -> int:
        return len(self.alphabet)

    @classmethod
    def from_text(cls, text: str) -> "ByteVocab":
        return cls(tuple(sorted(set(text.encode("utf-8")))))

    def encode(self, text: str) -> list[int]:
        table = {b: i for i, b in enumerate(self.alphabet)}
        try:
            return [table[b] for b in text.encode("utf-8")]
        except KeyError as exc:
            raise ArgumentError(f"byte {exc.args[0]} not in vocabulary") from None

    def decode(self, ids: list[int]) -> str:
        if any(i < 0 or i >= self.size for i in ids):
            raise ArgumentError("token id out of range")
        return bytes(self.alphabet[i] for i in ids).decode("utf-8", errors="replace")

    def to_json(self) -> str:
        return json.dumps({"alphabet": list(self.alphabet)})

    @classmethod
    def from_json(cls, blob: str) -> "ByteVocab":
        return cls(tuple(json.loads(blob)["alphabet"]))


def load_corpus(path: str | Path) -> str:
    """Read a corpus file: plain UTF-8 text, or JSONL with a "text" field."""
    raw = Path(path).read_text(encoding="utf-8")
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        texts = []
        for line in raw.splitlines():
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "text" not in record:
                raise ArgumentError("structured corpus line lacks a 'text' field")
            texts.append(record["text"])
        return "\n".join(texts) + "\n"
    return raw
