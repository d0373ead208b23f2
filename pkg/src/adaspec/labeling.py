"""Inference-aligned training data: label drafts against target outputs.

The collector replays the exact decode loop in greedy mode with a large
draft window, so the recorded hidden states are the ones inference produces,
and the acceptance labels are the decode loop's own accept/reject pattern:
a run of 1s up to the first token that disagrees with the target's greedy
continuation, 0s after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .specdec import DecodeConfig, FixedWindowPolicy, greedy_generate, speculative_loop

DEFAULT_TRAIN_WINDOW = 50


@dataclass
class LabeledDraftStep:
    """One draft window with binary acceptance labels and draft hidden states."""

    prefix_len: int          # committed tokens (prompt + response prefix) before the step
    tokens: list[int]        # drafted tokens
    labels: np.ndarray       # int8, a run of 1s then a run of 0s
    hiddens: np.ndarray      # (len(tokens), d) hidden state behind each draft

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.tokens) != len(self.labels) or len(self.tokens) != len(self.hiddens):
            raise ArgumentError("tokens, labels and hiddens must align")
        ones = int(self.labels.sum())
        if not np.array_equal(self.labels,
                              np.array([1] * ones + [0] * (len(self.labels) - ones), dtype=np.int8)):
            raise ArgumentError("labels must be a 1-run followed by a 0-run")


def generate_targets(target, prompts: list[list[int]], max_len: int,
                     stop_tokens: frozenset[int] = frozenset()) -> list[list[int]]:
    """Greedy target responses, one per prompt; deterministic."""
    if not prompts:
        raise ArgumentError("prompts must be nonempty")
    return [greedy_generate(target, p, max_len, stop_tokens) for p in prompts]


def label_drafts(draft_tokens: list[int], target_tokens: list[int]) -> np.ndarray:
    """1 up to the first mismatch with the target tokens, 0 from there on."""
    if len(target_tokens) < len(draft_tokens):
        raise ArgumentError("target tokens must cover every draft position")
    labels = np.zeros(len(draft_tokens), dtype=np.int8)
    for i, (d, t) in enumerate(zip(draft_tokens, target_tokens)):
        if d != t:
            break
        labels[i] = 1
    else:
        return labels
    return labels


def collect_training_steps(target, draft, prompt: list[int],
                           gamma_train: int = DEFAULT_TRAIN_WINDOW,
                           max_len: int = 96,
                           stop_tokens: frozenset[int] = frozenset(),
                           ) -> tuple[list[int], list[LabeledDraftStep]]:
    """Replay the decode loop with a wide window; returns (response, steps).

    Each step drafts up to `gamma_train` tokens from the current frontier,
    labels them by agreement with the target's greedy continuation, and the
    frontier jumps past the accepted run plus the correction token. Draft
    positions beyond the end of the response are dropped (there is no target
    token to compare them against).
    """
    if gamma_train < 1:
        raise ArgumentError("gamma_train must be >= 1")
    cfg = DecodeConfig(mode="greedy", gamma=gamma_train, max_new_tokens=max_len,
                       stop_tokens=stop_tokens)
    sink: list = []
    response, _ = speculative_loop(target, draft, prompt, cfg,
                                   FixedWindowPolicy(gamma_train), draft_sink=sink)
    end = len(prompt) + len(response)
    steps = []
    for base_len, drafts, accepted in sink:
        keep = min(len(drafts), end - base_len)
        if keep <= 0:
            continue
        labels = np.zeros(keep, dtype=np.int8)
        labels[:min(accepted, keep)] = 1
        steps.append(LabeledDraftStep(
            prefix_len=base_len,
            tokens=[d.token for d in drafts[:keep]],
            labels=labels,
            hiddens=np.stack([d.hidden for d in drafts[:keep]]),
        ))
    return response, steps
