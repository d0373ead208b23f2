"""KV caches for incremental decoding, with exact rollback.

Truncating a cache to n positions must leave it indistinguishable from a
fresh cache built over the first n tokens; the rejection rollback in the
decode loop relies on this.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch

from .errors import ArgumentError


@runtime_checkable
class KvCache(Protocol):
    def __len__(self) -> int: ...

    def truncate(self, n: int) -> None: ...


class LayerKvCache:
    """Per-layer key/value tensors for a transformer, shape (H, T, Dh)."""

    def __init__(self, num_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * num_layers
        self.values: list[torch.Tensor | None] = [None] * num_layers
        self._length = 0

    def __len__(self) -> int:
        return self._length

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.keys[layer] is None:
            self.keys[layer] = k
            self.values[layer] = v
        else:
            self.keys[layer] = torch.cat((self.keys[layer], k), dim=1)
            self.values[layer] = torch.cat((self.values[layer], v), dim=1)
        if layer == len(self.keys) - 1:
            self._length += k.shape[1]
        return self.keys[layer], self.values[layer]

    def truncate(self, n: int) -> None:
        if n > self._length:
            raise ArgumentError(f"cannot truncate cache of length {self._length} to {n}")
        if n == self._length:
            return
        for i in range(len(self.keys)):
            if self.keys[i] is not None:
                self.keys[i] = self.keys[i][:, :n, :]
                self.values[i] = self.values[i][:, :n, :]
        self._length = n


class TokenCache:
    """Cache for table-lookup models: just the consumed token history."""

    def __init__(self):
        self.tokens: list[int] = []

    def __len__(self) -> int:
        return len(self.tokens)

    def append(self, tokens: list[int]) -> None:
        self.tokens.extend(tokens)

    def truncate(self, n: int) -> None:
        if n > len(self.tokens):
            raise ArgumentError(f"cannot truncate cache of length {len(self.tokens)} to {n}")
        del self.tokens[n:]


def truncate_cache(cache: KvCache, n: int) -> KvCache:
    """Shrink `cache` to its first n positions (in place); returns the cache."""
    if n < 0:
        raise ArgumentError("cannot truncate to a negative length")
    cache.truncate(n)
    return cache
