"""Save/load language models through the checkpoint container."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .models import ModelSpec, TabularLM, TinyTransformerLM
from .tokenizer import ByteVocab


def save_lm(path: str | Path, model, vocab: ByteVocab | None = None,
            sidecar: dict | None = None) -> Path:
    extras: dict = {}
    if vocab is not None:
        extras["alphabet"] = list(vocab.alphabet)
    if isinstance(model, TinyTransformerLM):
        tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    elif isinstance(model, TabularLM):
        tensors = {"table": model.table}
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    return save_checkpoint(path, model.spec, tensors, extras=extras, sidecar=sidecar)


def load_lm(path: str | Path):
    """Returns (model, vocab-or-None)."""
    spec, tensors, extras = load_checkpoint(path)
    vocab = ByteVocab(tuple(extras["alphabet"])) if "alphabet" in extras else None
    if spec.kind == "transformer":
        model = TinyTransformerLM(spec)
        state = {name: torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float64)
                 for name, arr in tensors.items()}
        model.load_state_dict(state)
        return model, vocab
    if spec.kind == "tabular":
        # float32 storage perturbs row sums; renormalize to restore the invariant
        table = tensors["table"]
        table = table / table.sum(axis=1, keepdims=True)
        return TabularLM(spec, table), vocab
    raise CheckpointError(f"not a language-model checkpoint (kind={spec.kind!r})")
