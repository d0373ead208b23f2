"""Independent analytic oracles for distribution-preservation checks.

Everything here is derived from the acceptance rule's math directly --
min(p, q) acceptance mass, total rejection mass, residual renormalization --
with no imports from the decode engine. Integrating out the verification
uniforms turns one decode step into exact token-emission probabilities;
chaining steps gives exact per-position output marginals for order-1 table
models. The engine is correct when these marginals coincide with the target
model's own Markov marginals.

For adaptive (blockwise pre-verified) drafting the step kernel additionally
enumerates draft chains block by block, replaying the halting arithmetic on
the pre-verifier's scores; the verification math stays identical.
"""

from __future__ import annotations

import numpy as np


def acceptance_tables(p: np.ndarray, q: np.ndarray):
    """(A, beta, R): joint draft-and-accept mass, rejection mass, residual rows.

    A[a, b] = q(b|a) * min(1, p(b|a)/q(b|a)) = min(p(b|a), q(b|a))
    beta[a] = 1 - sum_b A[a, b]
    R[a, z] = max(0, p(z|a) - q(z|a)) / beta[a]   (rows with beta=0 unused)
    """
    a = np.minimum(p, q)
    beta = 1.0 - a.sum(axis=1)
    res = np.maximum(p - q, 0.0)
    safe = np.where(beta > 1e-15, beta, 1.0)
    r = res / safe[:, None]
    return a, beta, r


def target_marginals(p: np.ndarray, s0: int, n: int) -> np.ndarray:
    """Exact autoregressive marginals of the target chain: row t is position t+1."""
    v = p.shape[0]
    out = np.zeros((n, v))
    state = np.zeros(v)
    state[s0] = 1.0
    for t in range(n):
        state = state @ p
        out[t] = state
    return out


def fixed_sd_marginals(p: np.ndarray, q: np.ndarray, s0: int, gamma: int,
                       n: int) -> np.ndarray:
    """Exact per-position output marginals of fixed-window speculative decoding.

    The decode process is a Markov chain over (last emitted token, phase),
    where phase d < gamma means d drafts of the current window have been
    accepted so far and phase gamma means only the bonus emission remains:
      phase d < gamma: emit accepted draft b with mass A[a, b] -> (b, d+1);
                       emit correction z with mass beta[a] * R[a, z] -> (z, 0)
      phase gamma:     emit bonus z with mass p(z|a) -> (z, 0)
    The emitted token is the destination's token coordinate, so position
    marginals are coordinate sums of the chain distribution.
    """
    v = p.shape[0]
    a_mass, beta, resid = acceptance_tables(p, q)
    phases = gamma + 1
    size = v * phases

    def idx(token: int, phase: int) -> int:
        return token * phases + phase

    trans = np.zeros((size, size))
    for a in range(v):
        for d in range(gamma):
            src = idx(a, d)
            for b in range(v):
                trans[src, idx(b, d + 1)] += a_mass[a, b]
                trans[src, idx(b, 0)] += beta[a] * resid[a, b]
        src = idx(a, gamma)
        for z in range(v):
            trans[src, idx(z, 0)] += p[a, z]

    state = np.zeros(size)
    state[idx(s0, 0)] = 1.0
    out = np.zeros((n, v))
    for t in range(n):
        state = state @ trans
        out[t] = state.reshape(v, phases).sum(axis=1)
    return out


def chain_step_kernel(p: np.ndarray, q: np.ndarray, s0: int,
                      chains: list[tuple[tuple[int, ...], float]]):
    """Emission distribution of one decode step given its possible draft chains.

    `chains` lists (tokens, probability-of-drafting-them) for every chain the
    drafting policy can produce from state s0; probabilities must sum to 1.
    Returns a list of (emitted tuple, probability).
    """
    _, beta, resid = acceptance_tables(p, q)
    v = p.shape[0]
    out: list[tuple[tuple[int, ...], float]] = []
    for tokens, chain_prob in chains:
        cum = chain_prob
        prev = s0
        for i, tok in enumerate(tokens):
            ratio = min(1.0, p[prev, tok] / q[prev, tok])
            reject = cum * (1.0 - ratio)
            if reject > 0:
                for z in range(v):
                    mass = reject * resid[prev, z]
                    if mass > 0:
                        out.append((tokens[:i] + (z,), mass))
            cum *= ratio
            prev = tok
        if cum > 0:
            last = tokens[-1] if tokens else s0
            for z in range(v):
                mass = cum * p[last, z]
                if mass > 0:
                    out.append((tokens + (z,), mass))
    return out


def _expand(front_by_offset, kernels, out, n, v):
    """Exact DP over (output offset, last emitted token); fills `out` in place."""
    while front_by_offset:
        off = min(front_by_offset)
        states = front_by_offset.pop(off)
        for state, weight in states.items():
            for emitted, prob in kernels(state):
                mass = weight * prob
                for j, tok in enumerate(emitted):
                    if off + j < n:
                        out[off + j, tok] += mass
                end = off + len(emitted)
                if end < n:
                    slot = front_by_offset.setdefault(end, {})
                    slot[emitted[-1]] = slot.get(emitted[-1], 0.0) + mass
    return out


def sd_marginals_via_kernels(p, q, s0, n, chain_enumerator) -> np.ndarray:
    """Per-position marginals for a drafting policy given its chain enumerator.

    `chain_enumerator(state)` must list the possible draft chains (tokens,
    probability) from a step frontier whose last token is `state`.
    """
    v = p.shape[0]
    kernel_cache: dict[int, list] = {}

    def kernels(state: int):
        if state not in kernel_cache:
            kernel_cache[state] = chain_step_kernel(p, q, state,
                                                    chain_enumerator(state))
        return kernel_cache[state]

    out = np.zeros((n, v))
    front_by_offset = {0: {s0: 1.0}}
    return _expand(front_by_offset, kernels, out, n, v)


def fixed_chain_enumerator(q: np.ndarray, gamma: int):
    """All draft chains of length gamma with their sampling probabilities."""
    v = q.shape[0]

    def enumerate_chains(state: int):
        chains = [((), 1.0)]
        for _ in range(gamma):
            chains = [
                (tokens + (b,), prob * q[tokens[-1] if tokens else state, b])
                for tokens, prob in chains
                for b in range(v)
                if prob * q[tokens[-1] if tokens else state, b] > 0
            ]
        return chains

    return enumerate_chains


def _block_extensions(q: np.ndarray, state: int, chain: tuple[int, ...],
                      prob: float, block: int):
    """All one-block continuations of a chain with their joint probabilities."""
    v = q.shape[0]
    exts = [(chain, prob)]
    for _ in range(block):
        exts = [
            (tokens + (b,), w * q[tokens[-1] if tokens else state, b])
            for tokens, w in exts
            for b in range(v)
            if w * q[tokens[-1] if tokens else state, b] > 0
        ]
    return exts


def blockwise_chain_enumerator(q: np.ndarray, halt, score_block, decide):
    """Chains produced by blockwise pre-verified drafting from one state.

    `score_block(state, chain, round_index)` must return the pre-verifier
    scores of the newest block of `chain`; `decide(scores, threshold)` the
    stop flag. Thresholds follow the per-round growth schedule. The halting
    replay mirrors the decode loop: a stop after round k (or reaching the
    round cap) freezes the chain at k blocks.
    """

    def enumerate_chains(state: int):
        results: list[tuple[tuple[int, ...], float]] = []

        def recurse(chain: tuple[int, ...], prob: float, threshold: float,
                    round_index: int) -> None:
            for new_chain, new_prob in _block_extensions(q, state, chain, prob,
                                                         halt.block_size):
                scores = score_block(state, new_chain, round_index)
                stop = decide(scores, threshold)
                if stop or round_index + 1 >= halt.max_rounds:
                    results.append((new_chain, new_prob))
                else:
                    recurse(new_chain, new_prob, threshold * halt.growth,
                            round_index + 1)

        recurse((), 1.0, halt.threshold, 0)
        return results

    return enumerate_chains


def sd_marginals_full_history(p: np.ndarray, q: np.ndarray, prefix: list[int],
                              n: int, chain_enumerator_for_history) -> np.ndarray:
    """Exact marginals when drafting may depend on the whole emitted history.

    Enumerates every output history up to length n; feasible only for tiny
    vocabularies and horizons. `chain_enumerator_for_history(history)` lists
    the possible draft chains from a frontier with that full token history.
    """
    v = p.shape[0]
    out = np.zeros((n, v))
    stack: list[tuple[tuple[int, ...], int, float]] = [(tuple(prefix), 0, 1.0)]
    while stack:
        history, offset, weight = stack.pop()
        emissions = chain_step_kernel(p, q, history[-1],
                                      chain_enumerator_for_history(history))
        for emitted, prob in emissions:
            mass = weight * prob
            if mass == 0:
                continue
            for j, tok in enumerate(emitted):
                if offset + j < n:
                    out[offset + j, tok] += mass
            end = offset + len(emitted)
            if end < n:
                stack.append((history + emitted, end, mass))
    return out
