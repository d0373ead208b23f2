"""Vanilla speculative decoding: draft, verify in parallel, roll back.

One decode step drafts a window of tokens with the cheap model, scores them
all in a single target forward, accepts a prefix under the stochastic (or
greedy) rule, and emits exactly one extra token -- the residual-resampled
correction after a rejection, or a bonus token from the target's next
distribution when every draft survived. Both models' caches are then
truncated back to the accepted frontier.

The drafting loop is factored behind a small policy interface so that
adaptive halting strategies (blockwise pre-verification, probability and
entropy heuristics, the max-acceptance oracle) reuse the identical
verification path; the output distribution is the target model's no matter
how the per-step window is chosen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ArgumentError, DegenerateResidualError, InvalidDraftError
from .records import StepRecord
from .sampling import check_probs, greedy, sample


@dataclass
class DraftToken:
    """One speculated token with the distribution and hidden state behind it."""

    token: int
    dist: np.ndarray        # the distribution the token was sampled from
    hidden: np.ndarray      # final-layer hidden state that produced `dist`
    position: int           # 1-based index within the current decode step

    def __post_init__(self):
        if self.position < 1:
            raise ArgumentError("draft position is 1-based")


@dataclass
class VerifyOutcome:
    accepted_count: int
    emitted: list[int]      # accepted drafts plus exactly one extra token
    all_accepted: bool


@dataclass
class DecodeConfig:
    mode: str = "greedy"            # "greedy" | "stochastic"
    gamma: int = 4                  # fixed window (vanilla SD only)
    max_new_tokens: int = 64
    stop_tokens: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "stochastic"):
            raise ArgumentError(f"unknown decode mode {self.mode!r}")
        if self.gamma < 1 or self.max_new_tokens < 1:
            raise ArgumentError("gamma and max_new_tokens must be >= 1")
        self.stop_tokens = frozenset(self.stop_tokens)


def accept_prob(p: np.ndarray, q: np.ndarray, y: int) -> float:
    """Probability that draft token y (sampled from q) survives verification."""
    p = check_probs(p)
    q = check_probs(q)
    if q[y] <= 0.0:
        raise InvalidDraftError(f"token {y} has zero draft probability")
    if p[y] >= q[y]:
        return 1.0
    return float(p[y] / q[y])


def residual_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """norm(max(0, p - q)): the corrected distribution after a rejection."""
    p = check_probs(p)
    q = check_probs(q)
    res = np.maximum(p - q, 0.0)
    total = res.sum()
    if total <= 0.0:
        raise DegenerateResidualError("target distribution never exceeds the draft's")
    return res / total


def verify(target_dists: list[np.ndarray], drafts: list[DraftToken], mode: str,
           gen: np.random.Generator | None = None) -> VerifyOutcome:
    """Accept a prefix of the drafts and emit one extra token.

    Stochastic mode draws one uniform per draft and rejects at the first
    index where it exceeds p[y]/q[y]; the extra token then comes from the
    residual distribution at the rejection point, or from the target's
    bonus distribution when everything was accepted. Greedy mode accepts the
    longest prefix matching the target argmaxes.
    """
    gamma = len(drafts)
    if len(target_dists) != gamma + 1:
        raise ArgumentError("need exactly len(drafts)+1 target distributions")
    if mode == "greedy":
        n = 0
        while n < gamma and drafts[n].token == greedy(target_dists[n]):
            n += 1
        extra = greedy(target_dists[n])
    elif mode == "stochastic":
        if gen is None:
            raise ArgumentError("stochastic verification needs an rng")
        uniforms = gen.random(gamma)
        n = gamma
        for i, draft in enumerate(drafts):
            if uniforms[i] > accept_prob(target_dists[i], draft.dist, draft.token):
                n = i
                break
        if n < gamma:
            extra = sample(residual_dist(target_dists[n], drafts[n].dist), gen)
        else:
            extra = sample(target_dists[gamma], gen)
    else:
        raise ArgumentError(f"unknown verify mode {mode!r}")
    emitted = [d.token for d in drafts[:n]] + [extra]
    return VerifyOutcome(accepted_count=n, emitted=emitted, all_accepted=n == gamma)


class _DraftRun:
    """Incremental drafting against one model cache.

    Consumption is lazy: a drafted token is fed back through the model only
    when another token is needed after it, so drafting g tokens costs exactly
    g forward passes (the first one also catches the cache up on committed
    tokens it has not seen). Hidden states are tracked both per draft (the
    state that produced it) and per consumed token (the state after it),
    the latter feeding the pre-verifier's accepted-token context.
    """

    def __init__(self, model, context: list[int], cache, mode: str,
                 gen: np.random.Generator | None, stop_tokens: frozenset[int]):
        if len(cache) >= len(context):
            raise ArgumentError("draft cache already covers the whole context")
        self.model = model
        self.context = context
        self.cache = cache
        self.mode = mode
        self.gen = gen
        self.stop_tokens = stop_tokens
        self.tokens: list[DraftToken] = []
        self.consumed_hiddens: list[np.ndarray] = []
        self.pending_hiddens: np.ndarray | None = None
        self.forwards = 0
        self.hit_stop = False
        self._next_dist: np.ndarray | None = None
        self._next_hidden: np.ndarray | None = None

    @property
    def primed(self) -> bool:
        return self.forwards > 0

    def prime(self) -> None:
        gap = self.context[len(self.cache):]
        probs, hiddens, _ = self.model.forward(gap, self.cache)
        self.forwards += 1
        self.pending_hiddens = hiddens
        self._next_dist, self._next_hidden = probs[-1], hiddens[-1]

    def _pick(self, dist: np.ndarray) -> int:
        if self.mode == "greedy":
            return greedy(dist)
        return sample(dist, self.gen)

    def extend(self, count: int) -> list[DraftToken]:
        """Draft up to `count` more tokens (fewer if a stop token appears)."""
        out: list[DraftToken] = []
        for _ in range(count):
            if self.hit_stop:
                break
            if not self.primed:
                self.prime()
            elif self._next_dist is None:
                probs, hiddens, _ = self.model.forward([self.tokens[-1].token], self.cache)
                self.forwards += 1
                self.consumed_hiddens.append(hiddens[-1])
                self._next_dist, self._next_hidden = probs[-1], hiddens[-1]
            token = self._pick(self._next_dist)
            draft = DraftToken(token=token, dist=self._next_dist,
                               hidden=self._next_hidden, position=len(self.tokens) + 1)
            self.tokens.append(draft)
            out.append(draft)
            self._next_dist = self._next_hidden = None
            if token in self.stop_tokens:
                self.hit_stop = True
        return out


def draft_run(model, prefix: list[int], n: int, cache, mode: str = "stochastic",
              gen: np.random.Generator | None = None,
              stop_tokens: frozenset[int] = frozenset()) -> list[DraftToken]:
    """Autoregressively draft n tokens continuing `prefix` against `cache`."""
    if n < 1:
        raise ArgumentError("draft count must be >= 1")
    if mode == "stochastic" and gen is None:
        raise ArgumentError("stochastic drafting needs an rng")
    run = _DraftRun(model, list(prefix), cache, mode, gen, stop_tokens)
    return run.extend(n)


class DraftLengthPolicy:
    """Decides how many tokens to draft before each verification.

    The engine drives one step as: `start_step`, then repeatedly ask
    `next_quota` and report the drafted chunk via `observe_block`, until the
    quota is zero or drafting was cut short; after verification it calls
    `end_step` with what was kept. `on_context_hiddens` delivers the hidden
    states of committed tokens as the draft model consumes them, in order.
    """

    def start_step(self, step_index: int, committed: list[int]) -> None:
        pass

    def on_context_hiddens(self, hiddens: np.ndarray) -> None:
        pass

    def next_quota(self, drafted: int) -> int:
        raise NotImplementedError

    def observe_block(self, drafts: list[DraftToken]) -> None:
        pass

    def end_step(self, accepted: int, consumed_hiddens: list[np.ndarray]) -> None:
        pass

    @property
    def preverify_calls(self) -> int:
        return 0


class FixedWindowPolicy(DraftLengthPolicy):
    def __init__(self, gamma: int):
        if gamma < 1:
            raise ArgumentError("gamma must be >= 1")
        self.gamma = gamma

    def next_quota(self, drafted: int) -> int:
        return self.gamma if drafted == 0 else 0


def speculative_loop(target, draft, prefix: list[int], config: DecodeConfig,
                     policy: DraftLengthPolicy,
                     draft_sink: list | None = None) -> tuple[list[int], list[StepRecord]]:
    """Run the full decode loop; returns (emitted tokens, per-step records).

    When `draft_sink` is given, every step appends
    (committed length at step start, drafted tokens, accepted count) to it;
    the training-data collector uses this to capture exactly what inference saw.
    """
    if not prefix:
        raise ArgumentError("prefix must be nonempty")
    if target.vocab_size != draft.vocab_size:
        raise ArgumentError("target and draft must share a vocabulary")

    draft_gen = rng.substream(config.seed, rng.DRAFT_SAMPLING)
    verify_gen = rng.substream(config.seed, rng.VERIFY_UNIFORMS)

    committed = list(prefix)
    target_cache = target.new_cache()
    draft_cache = draft.new_cache()
    records: list[StepRecord] = []
    emitted_total = 0
    step_index = 0

    while emitted_total < config.max_new_tokens:
        base_len = len(committed)
        policy.start_step(step_index, committed)
        run = _DraftRun(draft, committed, draft_cache, config.mode, draft_gen,
                        config.stop_tokens)

        drafted = 0
        # leave headroom for the extra token's later consumption by the draft
        room = min(draft.context_len, target.context_len) - base_len - 1
        while room > 0:
            quota = policy.next_quota(drafted)
            if quota <= 0:
                break
            quota = min(quota, room)
            chunk = run.extend(quota)
            if drafted == 0 and chunk:
                policy.on_context_hiddens(run.pending_hiddens)
            drafted += len(chunk)
            room -= len(chunk)
            policy.observe_block(chunk)
            if run.hit_stop or len(chunk) < quota:
                break

        # one parallel target forward over its committed lag plus the drafts
        gap = committed[len(target_cache):]
        chunk = gap + [d.token for d in run.tokens]
        probs, _, _ = target.forward(chunk, target_cache)
        target_dists = [probs[i] for i in range(len(gap) - 1, len(chunk))]

        outcome = verify(target_dists, run.tokens, config.mode, verify_gen)

        # stop-token / length truncation of the emission
        kept = outcome.emitted
        for pos, tok in enumerate(kept):
            if tok in config.stop_tokens:
                kept = kept[:pos + 1]
                break
        kept = kept[:config.max_new_tokens - emitted_total]
        accepted_kept = min(outcome.accepted_count, len(kept))

        committed.extend(kept)
        emitted_total += len(kept)

        frontier = base_len + accepted_kept
        target_cache.truncate(min(len(target_cache), frontier))
        draft_cache.truncate(min(len(draft_cache), frontier))
        policy.end_step(accepted_kept, run.consumed_hiddens[:accepted_kept])

        if draft_sink is not None:
            draft_sink.append((base_len, list(run.tokens), accepted_kept))
        records.append(StepRecord(
            index=step_index,
            gamma=len(run.tokens),
            rounds=policy.preverify_calls,
            accepted=accepted_kept,
            draft_forwards=run.forwards,
            target_forwards=1,
            preverify_forwards=policy.preverify_calls,
            emitted=list(kept),
        ))
        step_index += 1

        if any(tok in config.stop_tokens for tok in kept):
            break
        if not kept:
            break

    return committed[len(prefix):], records


def sd_generate(target, draft, prefix: list[int],
                config: DecodeConfig) -> tuple[list[int], list[StepRecord]]:
    """Vanilla speculative decoding with a fixed per-step window."""
    return speculative_loop(target, draft, prefix, config,
                            FixedWindowPolicy(config.gamma))


def greedy_generate(model, prefix: list[int], max_new_tokens: int,
                    stop_tokens: frozenset[int] = frozenset()) -> list[int]:
    """Plain autoregressive greedy decoding (the reference output)."""
    if not prefix:
        raise ArgumentError("prefix must be nonempty")
    cache = model.new_cache()
    out: list[int] = []
    chunk = list(prefix)
    while len(out) < max_new_tokens:
        probs, _, _ = model.forward(chunk, cache)
        token = greedy(probs[-1])
        out.append(token)
        if token in stop_tokens:
            break
        chunk = [token]
    return out
