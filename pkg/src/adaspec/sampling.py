"""Sampling primitives over next-token distributions.

Distributions are plain 1-D float64 numpy arrays of length V that sum to 1;
`check_probs` enforces this wherever a distribution crosses a module
boundary.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantViolation

PROB_SUM_TOL = 1e-6


def check_probs(dist: np.ndarray) -> np.ndarray:
    """Validate a probability vector; returns it as a float64 array."""
    arr = np.asarray(dist, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InvariantViolation(f"expected a 1-D distribution, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation("distribution has non-finite entries")
    if np.any(arr < 0):
        raise InvariantViolation("distribution has negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise InvariantViolation(f"distribution sums to {total}, not 1")
    return arr


def sample(dist: np.ndarray, gen: np.random.Generator) -> int:
    """Draw a token id v with probability dist[v]."""
    arr = check_probs(dist)
    u = gen.random()
    cdf = np.cumsum(arr)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, arr.size - 1)


def greedy(dist: np.ndarray) -> int:
    """Argmax with lowest-index tie-break."""
    arr = check_probs(dist)
    return int(np.argmax(arr))  # np.argmax already returns the first maximum


def entropy_bits(dist: np.ndarray) -> float:
    """Shannon entropy of the distribution in bits."""
    arr = check_probs(dist)
    nz = arr[arr > 0]
    return float(-(nz * np.log2(nz)).sum())
