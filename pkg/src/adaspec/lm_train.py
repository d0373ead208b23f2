"""Training loop for the toy transformer language models.

Stands in for the pretrained draft/target pairs of full-scale deployments:
the same corpus trains a shallow "draft" model and a deeper "target" model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .errors import ArgumentError, TrainingError
from .models import ModelSpec, TinyTransformerLM
from .tokenizer import ByteVocab


@dataclass
class LmTrainConfig:
    steps: int = 400
    batch_size: int = 16
    seq_len: int = 96
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class LmTrainResult:
    model: TinyTransformerLM
    vocab: ByteVocab
    initial_loss: float
    final_loss: float
    val_loss: float
    val_perplexity: float


def _batch_windows(ids: np.ndarray, count: int, seq_len: int,
                   gen: np.random.Generator) -> torch.Tensor:
    starts = gen.integers(0, len(ids) - seq_len - 1, size=count)
    rows = np.stack([ids[s:s + seq_len + 1] for s in starts])
    return torch.from_numpy(rows.astype(np.int64))


def _ce_loss(model: TinyTransformerLM, window: torch.Tensor) -> torch.Tensor:
    logits = model.batched_logits(window[:, :-1])
    return torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), window[:, 1:].reshape(-1))


def eval_loss(model: TinyTransformerLM, ids: np.ndarray, cfg: LmTrainConfig,
              batches: int = 8) -> float:
    gen = rng.substream(cfg.seed, "lm-eval")
    total = 0.0
    with torch.no_grad():
        for _ in range(batches):
            window = _batch_windows(ids, cfg.batch_size, cfg.seq_len, gen)
            total += float(_ce_loss(model, window))
    return total / batches


def train_toy_lm(corpus: str, spec: ModelSpec, cfg: LmTrainConfig) -> LmTrainResult:
    """Train a char-level transformer; deterministic under (spec.seed, cfg.seed)."""
    if not corpus:
        raise ArgumentError("corpus is empty")
    vocab = ByteVocab.from_text(corpus)
    if vocab.size != spec.vocab_size:
        raise ArgumentError(
            f"spec.vocab_size={spec.vocab_size} but corpus alphabet has {vocab.size} symbols")
    ids = np.asarray(vocab.encode(corpus), dtype=np.int64)
    if len(ids) < cfg.seq_len + 2:
        raise ArgumentError("corpus shorter than one training window")

    split = max(cfg.seq_len + 2, int(len(ids) * (1.0 - cfg.val_fraction)))
    train_ids, val_ids = ids[:split], ids[split:]
    if len(val_ids) < cfg.seq_len + 2:
        val_ids = train_ids

    model = TinyTransformerLM(spec)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
    gen = rng.substream(cfg.seed, rng.TRAIN_SHUFFLE)

    initial = final = None
    for step in range(cfg.steps):
        window = _batch_windows(train_ids, cfg.batch_size, cfg.seq_len, gen)
        loss = _ce_loss(model, window)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingError("training loss diverged", step=step)
        if initial is None:
            initial = value
        final = value
        opt.zero_grad()
        loss.backward()
        opt.step()

    val = eval_loss(model, val_ids, cfg)
    return LmTrainResult(model=model, vocab=vocab, initial_loss=float(initial),
                         final_loss=float(final), val_loss=val,
                         val_perplexity=float(np.exp(val)))
