"""Blockwise pre-verification and adaptive draft-length control.

The pre-verifier is a single transformer layer over the draft model's hidden
states. During decoding, drafts are generated in blocks; after each block the
pre-verifier scores every draft in it with an estimated acceptance
probability, a halting criterion aggregates the block's scores against a
threshold, and drafting either stops (triggering target verification) or
continues with the threshold relaxed by a growth factor. Inputs are the
draft hidden states plus a learned embedding of the token's position within
the current draft window; hidden states of already-accepted tokens enter the
pre-verifier's context without a position embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import rng as rng_mod
from .cache import KvCache
from .errors import ArgumentError, CheckpointError, ConfigError
from .checkpoint import load_checkpoint, save_checkpoint
from .models import ModelSpec, init_module_weights
from .records import StepRecord
from .sampling import entropy_bits
from .specdec import (DecodeConfig, DraftLengthPolicy, DraftToken,
                      speculative_loop)

SCOPES = ("full", "local_draft", "local_block")
CRITERIA = ("mean", "any", "last")


@dataclass
class HaltConfig:
    """Control knobs for blockwise adaptive drafting."""

    block_size: int = 4
    threshold: float = 0.70
    growth: float = 1.05
    max_rounds: int = 8
    criterion: str = "mean"
    scope: str = "full"

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("threshold must lie in (0, 1)")
        if self.growth < 1.0:
            raise ConfigError("growth factor must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")


@dataclass
class HaltDecision:
    stop: bool
    scores: np.ndarray
    aggregate: float
    threshold: float


def halt_decision(scores, threshold: float, criterion: str = "mean") -> HaltDecision:
    """Aggregate a block's scores and compare against the threshold.

    mean stops on aggregate <= t (ties stop, tolerating float rounding of
    the mean at 1e-9 relative); any stops when the minimum score is < t;
    last looks only at the final score in the block.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ArgumentError("halt_decision needs at least one score")
    if criterion == "mean":
        agg = float(arr.mean())
        stop = agg <= threshold or math.isclose(agg, threshold, rel_tol=1e-9)
    elif criterion == "any":
        agg = float(arr.min())
        stop = agg < threshold
    elif criterion == "last":
        agg = float(arr[-1])
        stop = agg < threshold
    else:
        raise ArgumentError(f"unknown halting criterion {criterion!r}")
    return HaltDecision(stop=stop, scores=arr, aggregate=agg, threshold=threshold)


def grow_threshold(threshold: float, growth: float) -> float:
    if growth < 1.0:
        raise ArgumentError("growth factor must be >= 1")
    return threshold * growth


def heuristic_halt_prob(drafts: list[DraftToken], threshold: float) -> bool:
    """Stop when the newest draft's own sampling probability is low."""
    if not drafts:
        raise ArgumentError("need at least one draft token")
    newest = drafts[-1]
    return float(newest.dist[newest.token]) < threshold


def heuristic_halt_entropy(drafts: list[DraftToken], threshold_bits: float) -> bool:
    """Stop when the newest draft distribution's entropy exceeds the threshold."""
    if not drafts:
        raise ArgumentError("need at least one draft token")
    return entropy_bits(drafts[-1].dist) > threshold_bits


class PvCache:
    """Pre-verifier KV cache with per-entry segment tags.

    tag 0 marks hidden states of accepted context; tags >= 1 number the
    pre-verification rounds of the current draft window. Only the layer
    inputs determine an entry's K/V (single layer), so context entries can
    be appended without running attention.
    """

    def __init__(self):
        self.k: torch.Tensor | None = None
        self.v: torch.Tensor | None = None
        self.tags: list[int] = []

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def context_count(self) -> int:
        return sum(1 for t in self.tags if t == 0)

    @property
    def current_block(self) -> int:
        return max(self.tags, default=0)

    def append(self, k: torch.Tensor, v: torch.Tensor, tag: int, count: int) -> None:
        if self.k is None:
            self.k, self.v = k, v
        else:
            self.k = torch.cat((self.k, k), dim=1)
            self.v = torch.cat((self.v, v), dim=1)
        self.tags.extend([tag] * count)

    def truncate(self, n: int) -> None:
        if n > len(self.tags):
            raise ArgumentError(f"cannot truncate cache of length {len(self.tags)} to {n}")
        if n == len(self.tags):
            return
        self.k = self.k[:, :n, :] if self.k is not None else None
        self.v = self.v[:, :n, :] if self.v is not None else None
        del self.tags[n:]

    def rollback_to_context(self) -> None:
        first_draft = next((i for i, t in enumerate(self.tags) if t != 0), len(self.tags))
        self.truncate(first_draft)


class PreVerifier(nn.Module):
    """Single-layer transformer scoring per-draft acceptance probabilities."""

    def __init__(self, d_model: int, heads: int = 4, max_positions: int = 64,
                 pos_mode: str = "learned", seed: int = 0, vocab_size: int = 2,
                 context_len: int = 4096):
        super().__init__()
        if d_model % heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if pos_mode not in ("learned", "sinusoidal"):
            raise ConfigError("pos_mode must be 'learned' or 'sinusoidal'")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.max_positions = max_positions
        self.pos_mode = pos_mode
        self.seed = seed
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn_qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_proj = nn.Linear(d_model, d_model)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp_fc = nn.Linear(d_model, 4 * d_model)
        self.mlp_proj = nn.Linear(4 * d_model, d_model)
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, 1)
        self.pos_table = nn.Parameter(torch.zeros(max_positions, d_model))
        self.to(torch.float64)
        init_module_weights(self, rng_mod.torch_seed(seed, "preverifier-init"))
        if pos_mode == "sinusoidal":
            with torch.no_grad():
                self.pos_table.copy_(self._sinusoidal_table())
            self.pos_table.requires_grad_(False)

    def _sinusoidal_table(self) -> torch.Tensor:
        pos = torch.arange(1, self.max_positions + 1, dtype=torch.float64).unsqueeze(1)
        dim = torch.arange(0, self.d_model, 2, dtype=torch.float64)
        angle = pos / torch.pow(10000.0, dim / self.d_model)
        table = torch.zeros(self.max_positions, self.d_model, dtype=torch.float64)
        table[:, 0::2] = torch.sin(angle)
        table[:, 1::2] = torch.cos(angle[:, : table[:, 1::2].shape[1]])
        return table

    def position_embedding(self, positions) -> torch.Tensor:
        """Rows for 1-based draft positions."""
        idx = torch.as_tensor(positions, dtype=torch.long)
        if idx.numel() == 0:
            raise ArgumentError("positions must be nonempty")
        if idx.min().item() < 1 or idx.max().item() > self.max_positions:
            raise ConfigError(
                f"draft position out of table range 1..{self.max_positions}")
        return self.pos_table[idx - 1]

    def new_cache(self) -> PvCache:
        return PvCache()

    def _kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        qkv = self.attn_qkv(self.ln_1(x))
        q, k, v = qkv.chunk(3, dim=-1)

        def heads(y):
            return y.view(-1, self.heads, self.head_dim).transpose(0, 1)

        return heads(q), heads(k), heads(v)

    @torch.no_grad()
    def append_context(self, hiddens: np.ndarray, cache: PvCache) -> None:
        """Add accepted-token hidden states (no position embedding) to the cache."""
        x = torch.as_tensor(np.atleast_2d(hiddens), dtype=torch.float64)
        if x.shape[0] == 0:
            return
        _, k, v = self._kv(x)
        cache.append(k, v, tag=0, count=x.shape[0])

    def _finish(self, x: torch.Tensor, attn_out: torch.Tensor) -> torch.Tensor:
        x = x + attn_out
        x = x + self.mlp_proj(torch.tanh(self.mlp_fc(self.ln_2(x))))
        return self.head(self.ln_f(x)).squeeze(-1)

    @torch.no_grad()
    def preverify_block(self, hiddens: np.ndarray, positions, cache: PvCache,
                        scope: str = "full") -> np.ndarray:
        """Score one block of drafts; returns acceptance probabilities in [0, 1].

        The block's inputs (hidden + position embedding) are appended to the
        cache as a new round; attention spans the cached context according to
        `scope` and is causal within the block.
        """
        logits = self.preverify_block_logits(hiddens, positions, cache, scope)
        return torch.sigmoid(torch.as_tensor(logits)).numpy()

    @torch.no_grad()
    def preverify_block_logits(self, hiddens: np.ndarray, positions, cache: PvCache,
                               scope: str = "full") -> np.ndarray:
        if scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")
        x_np = np.atleast_2d(np.asarray(hiddens, dtype=np.float64))
        b = x_np.shape[0]
        if b == 0 or len(positions) != b:
            raise ArgumentError("hiddens and positions must be equal-length and nonempty")
        x = torch.as_tensor(x_np) + self.position_embedding(positions)
        q, k, v = self._kv(x)
        block_tag = cache.current_block + 1
        cache.append(k, v, tag=block_tag, count=b)
        keys, values = cache.k, cache.v
        total = len(cache)

        tags = torch.tensor(cache.tags, dtype=torch.long)
        cols = torch.arange(total)
        rows = torch.arange(b).unsqueeze(1)
        causal = cols.unsqueeze(0) <= (total - b + rows)
        if scope == "full":
            visible = torch.ones(total, dtype=torch.bool)
        elif scope == "local_draft":
            visible = tags >= 1
        else:  # local_block
            visible = tags == block_tag
        mask = causal & visible.unsqueeze(0)

        scores = q @ keys.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ values).transpose(0, 1).reshape(b, self.d_model)
        return self._finish(x, self.attn_proj(out)).numpy()

    def forward_packed(self, inputs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Logits for every slot of a packed sequence under an explicit mask.

        `inputs` must already include position embeddings on draft slots.
        """
        length = inputs.shape[0]
        if mask.shape != (length, length):
            raise ArgumentError("mask shape must match input length")
        q, k, v = self._kv(inputs)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(0, 1).reshape(length, self.d_model)
        return self._finish(inputs, self.attn_proj(out))


class PacerPolicy(DraftLengthPolicy):
    """Blockwise pre-verified drafting: the adaptive loop's halting half."""

    def __init__(self, pv: PreVerifier, halt: HaltConfig):
        if halt.block_size * halt.max_rounds > pv.max_positions:
            raise ConfigError(
                "position table too small for block_size * max_rounds drafts")
        self.pv = pv
        self.halt = halt
        self.cache = pv.new_cache()
        self._stop = True
        self._rounds = 0
        self._threshold = halt.threshold

    def start_step(self, step_index: int, committed: list[int]) -> None:
        self._stop = False
        self._rounds = 0
        self._threshold = self.halt.threshold  # reset per decode step
        self.cache.rollback_to_context()

    def on_context_hiddens(self, hiddens: np.ndarray) -> None:
        self.pv.append_context(hiddens, self.cache)

    def next_quota(self, drafted: int) -> int:
        if self._stop or self._rounds >= self.halt.max_rounds:
            return 0
        return self.halt.block_size

    def observe_block(self, drafts: list[DraftToken]) -> None:
        if not drafts:
            return
        hiddens = np.stack([d.hidden for d in drafts])
        positions = [d.position for d in drafts]
        scores = self.pv.preverify_block(hiddens, positions, self.cache,
                                         scope=self.halt.scope)
        self._rounds += 1
        decision = halt_decision(scores, self._threshold, self.halt.criterion)
        if decision.stop:
            self._stop = True
        else:
            self._threshold = grow_threshold(self._threshold, self.halt.growth)

    def end_step(self, accepted: int, consumed_hiddens: list[np.ndarray]) -> None:
        self.cache.rollback_to_context()
        if consumed_hiddens:
            self.pv.append_context(np.stack(consumed_hiddens), self.cache)

    @property
    def preverify_calls(self) -> int:
        return self._rounds


class HeuristicPolicy(DraftLengthPolicy):
    """Draft-model-intrinsic halting: token probability or entropy."""

    def __init__(self, kind: str, threshold: float, max_draft: int = 32):
        if kind not in ("prob", "entropy"):
            raise ConfigError("heuristic kind must be 'prob' or 'entropy'")
        self.kind = kind
        self.threshold = threshold
        self.max_draft = max_draft
        self._stop = False

    def start_step(self, step_index: int, committed: list[int]) -> None:
        self._stop = False

    def next_quota(self, drafted: int) -> int:
        if self._stop or drafted >= self.max_draft:
            return 0
        return 1

    def observe_block(self, drafts: list[DraftToken]) -> None:
        if not drafts:
            return
        if self.kind == "prob":
            self._stop = heuristic_halt_prob(drafts, self.threshold)
        else:
            self._stop = heuristic_halt_entropy(drafts, self.threshold)


def pacer_generate(target, draft, pv: PreVerifier, prefix: list[int],
                   halt: HaltConfig,
                   decode: DecodeConfig) -> tuple[list[int], list[StepRecord]]:
    """Speculative decoding with blockwise pre-verified adaptive windows."""
    if pv.d_model != draft.hidden_dim:
        raise ConfigError(
            f"pre-verifier width {pv.d_model} != draft hidden width {draft.hidden_dim}")
    return speculative_loop(target, draft, prefix, decode, PacerPolicy(pv, halt))


def save_preverifier(path, pv: PreVerifier, sidecar: dict | None = None):
    spec = ModelSpec("preverifier", pv.vocab_size, 1, pv.d_model, pv.heads,
                     pv.context_len, pv.seed)
    tensors = {name: p.detach().numpy() for name, p in pv.state_dict().items()}
    extras = {"max_positions": pv.max_positions, "pos_mode": pv.pos_mode}
    return save_checkpoint(path, spec, tensors, extras=extras, sidecar=sidecar)


def load_preverifier(path) -> PreVerifier:
    spec, tensors, extras = load_checkpoint(path)
    if spec.kind != "preverifier":
        raise CheckpointError(f"not a pre-verifier checkpoint (kind={spec.kind!r})")
    pv = PreVerifier(spec.d_model, heads=spec.heads,
                     max_positions=int(extras["max_positions"]),
                     pos_mode=str(extras.get("pos_mode", "learned")),
                     seed=spec.seed, vocab_size=spec.vocab_size,
                     context_len=spec.context_len)
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float64)
             for name, arr in tensors.items()}
    pv.load_state_dict(state)
    return pv
