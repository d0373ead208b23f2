"""Deterministic synthetic corpus for desk-scale experiments.

Generates template-structured "pseudo code" lines from small word pools.
The char-level statistics are regular enough for a 1-layer draft model to
track a deeper target model inside words and common phrases, while word
choices at template slots create genuine disagreement points -- the regime
adaptive draft lengths are designed for.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import rng

NOUNS = [
    "vector", "matrix", "tensor", "signal", "buffer", "kernel", "window",
    "stream", "branch", "symbol", "anchor", "column", "cursor", "ledger",
    "packet", "radius", "scalar", "sample", "handle", "marker",
]

VERBS = [
    "maps", "holds", "emits", "scales", "shifts", "splits", "joins",
    "folds", "aligns", "tracks", "merges", "counts",
]

TEMPLATES = [
    "the {n0} {v0} the {n1} and the {n2} {v1} the {n3}.",
    "each {n0} {v0} one {n1} for every {n2} in the {n3}.",
    "let {n0} = {n1} + {n2} * {n3};",
    "if the {n0} {v0} the {n1} then the {n2} {v1} the {n3};",
    "for each {n0} in the {n1}: the {n2} {v0} the {n3};",
    "the {n0} of the {n1} {v0} the {n2} of the {n3}.",
]


def _zipf_choice(gen: np.random.Generator, pool: list[str]) -> str:
    # Skewed frequencies make common words very predictable.
    weights = 1.0 / np.arange(1, len(pool) + 1) ** 1.4
    weights /= weights.sum()
    return pool[int(gen.choice(len(pool), p=weights))]


def make_line(gen: np.random.Generator) -> str:
    template = TEMPLATES[int(gen.integers(len(TEMPLATES)))]
    slots = {}
    for i in range(4):
        slots[f"n{i}"] = _zipf_choice(gen, NOUNS)
    for i in range(2):
        slots[f"v{i}"] = _zipf_choice(gen, VERBS)
    return template.format(**slots)


def generate_corpus(seed: int = 0, size_bytes: int = 100 * 1024) -> str:
    gen = rng.substream(seed, "corpus")
    lines: list[str] = []
    total = 0
    while total < size_bytes:
        line = make_line(gen)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines) + "\n"


def default_corpus_path() -> Path:
    return Path(__file__).parent / "data" / "tiny_corpus.txt"


def default_corpus() -> str:
    path = default_corpus_path()
    if path.exists():
        return path.read_text(encoding="utf-8")
    return generate_corpus()


def sample_prompts(text: str, count: int, gen: np.random.Generator,
                   min_len: int = 8, max_len: int = 20) -> list[str]:
    """Draw prompts as prefixes of distinct corpus lines."""
    lines = [ln for ln in text.splitlines() if len(ln) > min_len]
    idx = gen.choice(len(lines), size=min(count, len(lines)), replace=False)
    prompts = []
    for i in idx:
        line = lines[int(i)]
        cut = int(gen.integers(min_len, min(max_len, len(line) - 1) + 1))
        prompts.append(line[:cut])
    return prompts
