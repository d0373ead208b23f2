"""Named random substreams derived from a single run seed.

Every source of randomness in a run (draft sampling, verification uniforms,
data shuffling, weight init) pulls from its own named stream so that any one
of them can be replayed independently of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Stream names used across the package. Free-form names are allowed; these
# constants just keep call sites consistent.
DRAFT_SAMPLING = "draft-sampling"
VERIFY_UNIFORMS = "verify-uniforms"
RESAMPLE = "resample"
TRAIN_SHUFFLE = "train-shuffle"
MODEL_INIT = "model-init"
PROMPTS = "prompts"


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for stream `name`, reproducible given (seed, name)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_stream_key(name),))
    return np.random.default_rng(ss)


def torch_seed(seed: int, name: str) -> int:
    """A 63-bit seed for torch.manual_seed, derived like substream()."""
    return _stream_key(name) ^ (seed & 0x7FFFFFFFFFFFFFFF)
