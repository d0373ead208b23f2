"""Packing a prompt's draft steps into one training sequence.

Unpacked, every draft step would be its own training example repeating the
shared prompt and response prefix. Packing lays out the prefix once,
followed by each step's draft tokens, and disambiguates the steps with a
custom attention mask: a draft token sees exactly the response prefix its
step started from plus the earlier drafts of its own step -- never drafts of
other steps. Position ids replicate what each token had at inference, so a
packed forward reproduces the per-step forwards exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError
from .halting import PreVerifier, PvCache
from .labeling import LabeledDraftStep

PREFIX = 0
DRAFT = 1


def build_attention_mask(prefix_lens: list[int], gammas: list[int]) -> np.ndarray:
    """Boolean (L, L) mask for a packed sequence; True = may attend.

    `prefix_lens[s]` is how much of the shared prefix step s starts from;
    `gammas[s]` its draft count. Prefix tokens attend causally among
    themselves and never to drafts; step s's m-th draft attends to the first
    prefix_lens[s] prefix positions and to its own step's drafts up to and
    including itself.
    """
    if len(prefix_lens) != len(gammas) or not prefix_lens:
        raise ArgumentError("need matching, nonempty prefix_lens and gammas")
    if any(g < 1 for g in gammas):
        raise ArgumentError("every step must have at least one draft")
    if any(p < 1 for p in prefix_lens):
        raise ArgumentError("prefix lengths must be >= 1")
    if any(b <= a for a, b in zip(prefix_lens, prefix_lens[1:])):
        raise ArgumentError("steps must be ordered by strictly increasing prefix length")

    prefix_total = prefix_lens[-1]
    length = prefix_total + sum(gammas)
    mask = np.zeros((length, length), dtype=bool)

    tri = np.tril(np.ones((prefix_total, prefix_total), dtype=bool))
    mask[:prefix_total, :prefix_total] = tri

    offset = prefix_total
    for p_len, g in zip(prefix_lens, gammas):
        rows = slice(offset, offset + g)
        mask[rows, :p_len] = True
        mask[rows, offset:offset + g] = np.tril(np.ones((g, g), dtype=bool))
        offset += g
    return mask


@dataclass
class PackedExample:
    """One prompt's draft steps packed into a single masked sequence."""

    tokens: np.ndarray        # (L,) int64
    pos_ids: np.ndarray       # (L,) inference-time absolute positions
    mask: np.ndarray          # (L, L) bool
    kinds: np.ndarray         # (L,) PREFIX or DRAFT
    step_ids: np.ndarray      # (L,) -1 on prefix, else step index
    draft_pos: np.ndarray     # (L,) 0 on prefix, else 1-based position in its step
    labels: np.ndarray        # (L,) -1 on prefix, else 0/1
    gather_src: np.ndarray    # (L,) slot whose model hidden feeds this slot
    prefix_len: int
    step_bounds: list[tuple[int, int]]
    stored_hiddens: np.ndarray | None = None  # (L, d) pre-verifier inputs before pos-emb

    @property
    def draft_slots(self) -> np.ndarray:
        return np.nonzero(self.kinds == DRAFT)[0]


def pack_steps(prompt: list[int], response: list[int],
               steps: list[LabeledDraftStep], draft_model=None) -> PackedExample:
    """Build a PackedExample; with `draft_model`, also store pre-verifier inputs.

    Stored inputs spare training a recompute pass through the draft model;
    without them the packed masked forward recreates the same hidden states.
    """
    if not steps:
        raise ArgumentError("need at least one draft step")
    full = list(prompt) + list(response)
    prefix_lens = [s.prefix_len for s in steps]
    gammas = [len(s.tokens) for s in steps]
    mask = build_attention_mask(prefix_lens, gammas)

    prefix_total = prefix_lens[-1]
    if prefix_total > len(full):
        raise ArgumentError("steps reference positions beyond prompt+response")
    length = prefix_total + sum(gammas)

    tokens = np.empty(length, dtype=np.int64)
    pos_ids = np.empty(length, dtype=np.int64)
    kinds = np.full(length, PREFIX, dtype=np.int8)
    step_ids = np.full(length, -1, dtype=np.int32)
    draft_pos = np.zeros(length, dtype=np.int32)
    labels = np.full(length, -1, dtype=np.int8)
    gather_src = np.arange(length, dtype=np.int64)

    tokens[:prefix_total] = full[:prefix_total]
    pos_ids[:prefix_total] = np.arange(prefix_total)

    offset = prefix_total
    bounds = []
    for sid, step in enumerate(steps):
        g = len(step.tokens)
        sl = slice(offset, offset + g)
        tokens[sl] = step.tokens
        pos_ids[sl] = step.prefix_len + np.arange(g)
        kinds[sl] = DRAFT
        step_ids[sl] = sid
        draft_pos[sl] = np.arange(1, g + 1)
        labels[sl] = step.labels
        gather_src[offset] = step.prefix_len - 1
        gather_src[offset + 1:offset + g] = np.arange(offset, offset + g - 1)
        bounds.append((offset, offset + g))
        offset += g

    stored = None
    if draft_model is not None:
        cache = draft_model.new_cache()
        _, prefix_hiddens, _ = draft_model.forward(full[:prefix_total], cache)
        stored = np.concatenate([prefix_hiddens] + [s.hiddens for s in steps], axis=0)

    return PackedExample(tokens=tokens, pos_ids=pos_ids, mask=mask, kinds=kinds,
                         step_ids=step_ids, draft_pos=draft_pos, labels=labels,
                         gather_src=gather_src, prefix_len=prefix_total,
                         step_bounds=bounds, stored_hiddens=stored)


def split_steps(steps: list[LabeledDraftStep], max_len: int) -> list[list[LabeledDraftStep]]:
    """Partition steps at step boundaries so every packed length fits max_len."""
    groups: list[list[LabeledDraftStep]] = []
    current: list[LabeledDraftStep] = []
    for step in steps:
        candidate = current + [step]
        length = candidate[-1].prefix_len + sum(len(s.tokens) for s in candidate)
        if current and length > max_len:
            groups.append(current)
            current = [step]
        else:
            current = candidate
    if current:
        groups.append(current)
    return groups


def pv_inputs(pv: PreVerifier, example: PackedExample, draft_model=None) -> torch.Tensor:
    """Pre-verifier inputs (L, d) for a packed example.

    Draft slots take the hidden state that produced their token -- the packed
    position of the preceding token in their step's chain -- plus the draft
    position embedding; prefix slots take their own hidden state unshifted.
    Hiddens are recomputed through the frozen draft model under the packed
    mask unless the example stores them.
    """
    if example.stored_hiddens is not None:
        base = torch.as_tensor(example.stored_hiddens, dtype=torch.float64)
    else:
        if draft_model is None:
            raise ArgumentError("need a draft model or stored hiddens")
        with torch.no_grad():
            out = draft_model.forward_masked(example.tokens.tolist(), example.pos_ids,
                                             torch.as_tensor(example.mask))
        base = out[torch.as_tensor(example.gather_src)]
    inputs = base.clone()
    slots = example.draft_slots
    if slots.size:
        emb = pv.position_embedding(example.draft_pos[slots].tolist())
        inputs[torch.as_tensor(slots)] += emb
    return inputs


def packed_logits(pv: PreVerifier, example: PackedExample,
                  draft_model=None) -> torch.Tensor:
    """Pre-verifier logits at every slot of the packed sequence."""
    inputs = pv_inputs(pv, example, draft_model)
    return pv.forward_packed(inputs, torch.as_tensor(example.mask))


def unpacked_step_logits(pv: PreVerifier, example: PackedExample,
                         draft_model=None) -> np.ndarray:
    """Oracle for the packed forward: replay each step through the cached path.

    Feeds the shared prefix hiddens as context and the step's drafts as one
    block, exactly as the decode loop would; returns logits for every draft
    slot in packed order.
    """
    if example.stored_hiddens is not None:
        base = torch.as_tensor(example.stored_hiddens, dtype=torch.float64)
    else:
        if draft_model is None:
            raise ArgumentError("need a draft model or stored hiddens")
        with torch.no_grad():
            out = draft_model.forward_masked(example.tokens.tolist(), example.pos_ids,
                                             torch.as_tensor(example.mask))
        base = out[torch.as_tensor(example.gather_src)]
    logits: list[np.ndarray] = []
    for lo, hi in example.step_bounds:
        step_prefix = int(example.pos_ids[lo])  # = the step's prefix length
        cache: PvCache = pv.new_cache()
        pv.append_context(base[:step_prefix].numpy(), cache)
        logits.append(pv.preverify_block_logits(
            base[lo:hi].numpy(), example.draft_pos[lo:hi].tolist(), cache))
    return np.concatenate(logits)
