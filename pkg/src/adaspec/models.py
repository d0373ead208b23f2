"""Language models: a tiny decoder-only transformer and an exact tabular model.

Both expose the same forward contract: feed a chunk of tokens against a KV
cache, get back one next-token distribution and one final-layer hidden state
per input position (numpy float64), with the cache advanced by the chunk
length. The transformer runs in float64 on CPU so that cached/uncached and
packed/unpacked forwards agree far inside the tolerances the decode loop
relies on.

The tabular model conditions on the last `order` tokens through an explicit
lookup table. Its outputs are exact table rows, which makes brute-force
distribution checks of the decode loop possible with no float slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .cache import KvCache, LayerKvCache, TokenCache
from .errors import ArgumentError, CapacityError, ConfigError

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description stored in checkpoint headers."""

    kind: str  # "transformer" | "tabular"
    vocab_size: int
    layers: int
    d_model: int
    heads: int
    context_len: int
    seed: int
    order: int = 1  # tabular only: context window length

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.kind in ("transformer", "preverifier"):
            if self.d_model % max(self.heads, 1) != 0:
                raise ConfigError("d_model must be divisible by heads")
            if self.layers < 1 or self.heads < 1:
                raise ConfigError(f"{self.kind} needs layers >= 1 and heads >= 1")
        elif self.kind == "tabular":
            if self.order < 1:
                raise ConfigError("tabular order must be >= 1")
        else:
            raise ConfigError(f"unknown model kind {self.kind!r}")


class LanguageModel:
    """Shared forward contract; see module docstring."""

    spec: ModelSpec

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    @property
    def hidden_dim(self) -> int:
        raise NotImplementedError

    @property
    def context_len(self) -> int:
        return self.spec.context_len

    def new_cache(self) -> KvCache:
        raise NotImplementedError

    def forward(self, tokens, cache) -> tuple[np.ndarray, np.ndarray, KvCache]:
        """Returns (probs (T,V), hiddens (T,d), cache) for a token chunk."""
        raise NotImplementedError

    def _check_forward_args(self, tokens, cache) -> list[int]:
        toks = list(tokens)
        if len(toks) == 0:
            raise ArgumentError("forward requires a nonempty token chunk")
        if any(t < 0 or t >= self.vocab_size for t in toks):
            raise ArgumentError("token id out of vocabulary range")
        if len(cache) + len(toks) > self.context_len:
            raise CapacityError(
                f"context overflow: {len(cache)} cached + {len(toks)} new > {self.context_len}"
            )
        return toks


class _Block(nn.Module):
    """Pre-LN transformer block."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn_qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_proj = nn.Linear(d_model, d_model)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp_fc = nn.Linear(d_model, 4 * d_model)
        self.mlp_proj = nn.Linear(4 * d_model, d_model)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        t, _ = x.shape
        return x.view(t, self.heads, self.head_dim).transpose(0, 1)  # (H, T, Dh)

    def attend(self, x: torch.Tensor, mask: torch.Tensor | None,
               layer_cache: LayerKvCache | None, layer_idx: int) -> torch.Tensor:
        """Self-attention over x (T, d); mask is (T, K) bool, True = visible."""
        qkv = self.attn_qkv(self.ln_1(x))
        q, k, v = qkv.chunk(3, dim=-1)
        q = self._split_heads(q)
        k = self._split_heads(k)
        v = self._split_heads(v)
        if layer_cache is not None:
            k, v = layer_cache.append(layer_idx, k, v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(0, 1).reshape(x.shape)
        return self.attn_proj(out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None,
                layer_cache: LayerKvCache | None, layer_idx: int) -> torch.Tensor:
        x = x + self.attend(x, mask, layer_cache, layer_idx)
        x = x + self.mlp_proj(torch.tanh(self.mlp_fc(self.ln_2(x))))
        return x


def init_module_weights(module: nn.Module, seed: int) -> None:
    """Deterministic init: N(0, 0.02) weights, zero biases, identity norms."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim >= 2 or "emb" in name or name.endswith((".wte.weight", ".wpe.weight")):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)
            elif "ln" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


class TinyTransformerLM(LanguageModel, nn.Module):
    """Decoder-only transformer with learned absolute position embeddings.

    The exported hidden state is the residual stream after the last block,
    before the final layer norm. `forward_masked` runs the same weights over
    an arbitrary attention mask and explicit position ids, which is what the
    packed-sequence training path uses.
    """

    def __init__(self, spec: ModelSpec):
        nn.Module.__init__(self)
        if spec.kind != "transformer":
            raise ConfigError("TinyTransformerLM needs a transformer spec")
        self.spec = spec
        self.wte = nn.Embedding(spec.vocab_size, spec.d_model)
        self.wpe = nn.Embedding(spec.context_len, spec.d_model)
        self.blocks = nn.ModuleList(_Block(spec.d_model, spec.heads) for _ in range(spec.layers))
        self.ln_f = nn.LayerNorm(spec.d_model)
        self.head = nn.Linear(spec.d_model, spec.vocab_size)
        self.to(DTYPE)
        init_module_weights(self, spec.seed)

    @property
    def hidden_dim(self) -> int:
        return self.spec.d_model

    def new_cache(self) -> LayerKvCache:
        return LayerKvCache(self.spec.layers)

    def _trunk(self, x: torch.Tensor, mask: torch.Tensor | None,
               cache: LayerKvCache | None) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x, mask, cache, i)
        return x

    @torch.no_grad()
    def forward(self, tokens, cache: LayerKvCache) -> tuple[np.ndarray, np.ndarray, LayerKvCache]:
        toks = self._check_forward_args(tokens, cache)
        offset = len(cache)
        t = len(toks)
        idx = torch.tensor(toks, dtype=torch.long)
        pos = torch.arange(offset, offset + t, dtype=torch.long)
        x = self.wte(idx) + self.wpe(pos)
        mask = None
        if t > 1:
            rows = torch.arange(t).unsqueeze(1)
            cols = torch.arange(offset + t).unsqueeze(0)
            mask = cols <= (rows + offset)
        hidden = self._trunk(x, mask, cache)
        logits = self.head(self.ln_f(hidden))
        probs = torch.softmax(logits, dim=-1)
        return probs.numpy(), hidden.numpy(), cache

    def forward_masked(self, tokens, pos_ids, mask: torch.Tensor) -> torch.Tensor:
        """Hidden states (L, d) under an explicit (L, L) boolean mask."""
        toks = list(tokens)
        if len(toks) == 0:
            raise ArgumentError("forward_masked requires a nonempty sequence")
        if mask.shape != (len(toks), len(toks)):
            raise ArgumentError("mask shape must match sequence length")
        pos = torch.as_tensor(pos_ids, dtype=torch.long)
        if pos.max().item() >= self.spec.context_len:
            raise CapacityError("position id beyond context capacity")
        x = self.wte(torch.tensor(toks, dtype=torch.long)) + self.wpe(pos)
        return self._trunk(x, mask, None)

    def batched_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        """Causal logits for a (B, T) training batch."""
        b, t = tokens.shape
        pos = torch.arange(t, dtype=torch.long)
        x = self.wte(tokens) + self.wpe(pos)
        mask = torch.tril(torch.ones(t, t, dtype=torch.bool))
        for i, block in enumerate(self.blocks):
            # batched variant of _Block.forward
            res = x
            h = block.ln_1(x)
            qkv = block.attn_qkv(h)
            q, k, v = qkv.chunk(3, dim=-1)

            def heads(y):
                return y.view(b, t, block.heads, block.head_dim).transpose(1, 2)

            q, k, v = heads(q), heads(k), heads(v)
            scores = q @ k.transpose(-1, -2) / math.sqrt(block.head_dim)
            scores = scores.masked_fill(~mask, float("-inf"))
            out = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, t, -1)
            x = res + block.attn_proj(out)
            x = x + block.mlp_proj(torch.tanh(block.mlp_fc(block.ln_2(x))))
        return self.head(self.ln_f(x))


class TabularLM(LanguageModel):
    """Exact order-k Markov model backed by a lookup table.

    table[key] is the next-token distribution for a context window encoded as
    a base-V integer over the last `order` tokens (left-padded with token 0
    near the sequence start). The hidden state of a position is the one-hot
    encoding of its context window, concatenated over the window slots.
    """

    def __init__(self, spec: ModelSpec, table: np.ndarray):
        if spec.kind != "tabular":
            raise ConfigError("TabularLM needs a tabular spec")
        v, k = spec.vocab_size, spec.order
        expected = (v ** k, v)
        table = np.asarray(table, dtype=np.float64)
        if table.shape != expected:
            raise ConfigError(f"table shape {table.shape} != {expected}")
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("table rows must be distributions")
        self.spec = spec
        self.table = table

    @property
    def hidden_dim(self) -> int:
        return self.spec.order * self.spec.vocab_size

    @classmethod
    def random(cls, vocab_size: int, gen: np.random.Generator, order: int = 1,
               concentration: float = 1.0, context_len: int = 1 << 20, seed: int = 0) -> "TabularLM":
        spec = ModelSpec("tabular", vocab_size, 0, order * vocab_size, 0,
                         context_len, seed, order=order)
        rows = gen.gamma(concentration, size=(vocab_size ** order, vocab_size))
        rows = np.maximum(rows, 1e-12)
        return cls(spec, rows / rows.sum(axis=1, keepdims=True))

    @classmethod
    def from_table(cls, table: np.ndarray, order: int = 1,
                   context_len: int = 1 << 20) -> "TabularLM":
        table = np.asarray(table, dtype=np.float64)
        v = table.shape[1]
        spec = ModelSpec("tabular", v, 0, order * v, 0, context_len, 0, order=order)
        return cls(spec, table)

    def new_cache(self) -> TokenCache:
        return TokenCache()

    def _window(self, history: list[int], upto: int) -> list[int]:
        k = self.spec.order
        lo = max(0, upto + 1 - k)
        window = history[lo:upto + 1]
        return [0] * (k - len(window)) + window

    def _key(self, window: list[int]) -> int:
        key = 0
        for t in window:
            key = key * self.spec.vocab_size + t
        return key

    def forward(self, tokens, cache: TokenCache) -> tuple[np.ndarray, np.ndarray, TokenCache]:
        toks = self._check_forward_args(tokens, cache)
        v = self.spec.vocab_size
        history = cache.tokens + toks
        start = len(cache)
        probs = np.empty((len(toks), v), dtype=np.float64)
        hiddens = np.zeros((len(toks), self.hidden_dim), dtype=np.float64)
        for j in range(len(toks)):
            window = self._window(history, start + j)
            probs[j] = self.table[self._key(window)]
            for slot, tok in enumerate(window):
                hiddens[j, slot * v + tok] = 1.0
        cache.append(toks)
        return probs, hiddens, cache

    def next_dist(self, context: list[int]) -> np.ndarray:
        """Table row for predicting the token after `context` (no cache)."""
        if not context:
            raise ArgumentError("context must be nonempty")
        window = self._window(list(context), len(context) - 1)
        return self.table[self._key(window)].copy()
