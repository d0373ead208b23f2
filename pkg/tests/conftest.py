"""Shared fixtures: one trained toy model pair and its derived artifacts.

Training runs once per session; everything downstream (labeled data, packed
dataset, trained pre-verifier) derives deterministically from it.
"""

from __future__ import annotations

import numpy as np
import pytest

from adaspec import rng
from adaspec.corpus import default_corpus, sample_prompts
from adaspec.halting import PreVerifier
from adaspec.labeling import collect_training_steps
from adaspec.lm_train import LmTrainConfig, train_toy_lm
from adaspec.models import ModelSpec, TabularLM
from adaspec.packing import pack_steps
from adaspec.pv_train import TrainHyperparams, train_preverifier
from adaspec.tokenizer import ByteVocab

DRAFT_SPEC = dict(layers=1, d_model=32, heads=2, context_len=160, seed=11)
TARGET_SPEC = dict(layers=3, d_model=48, heads=4, context_len=160, seed=12)
GAMMA_TRAIN = 50


@pytest.fixture(scope="session")
def corpus_text() -> str:
    return default_corpus()


@pytest.fixture(scope="session")
def vocab(corpus_text) -> ByteVocab:
    return ByteVocab.from_text(corpus_text)


@pytest.fixture(scope="session")
def newline_id(vocab) -> int:
    return vocab.encode("\n")[0]


@pytest.fixture(scope="session")
def draft_model(corpus_text, vocab):
    spec = ModelSpec("transformer", vocab.size, **DRAFT_SPEC)
    return train_toy_lm(corpus_text, spec,
                        LmTrainConfig(steps=350, batch_size=24, seq_len=80, seed=1)).model


@pytest.fixture(scope="session")
def target_model(corpus_text, vocab):
    spec = ModelSpec("transformer", vocab.size, **TARGET_SPEC)
    return train_toy_lm(corpus_text, spec,
                        LmTrainConfig(steps=500, batch_size=24, seq_len=80, seed=2)).model


@pytest.fixture(scope="session")
def train_prompts(corpus_text, vocab):
    gen = rng.substream(1234, rng.PROMPTS)
    return [vocab.encode(p) for p in sample_prompts(corpus_text, 128, gen)]


@pytest.fixture(scope="session")
def bench_prompts(corpus_text, vocab):
    gen = rng.substream(5678, rng.PROMPTS)
    return [vocab.encode(p) for p in sample_prompts(corpus_text, 24, gen)]


@pytest.fixture(scope="session")
def labeled_data(target_model, draft_model, train_prompts, newline_id):
    """(responses, steps) per training prompt."""
    stop = frozenset({newline_id})
    collected = []
    for prompt in train_prompts:
        response, steps = collect_training_steps(
            target_model, draft_model, prompt, gamma_train=GAMMA_TRAIN,
            max_len=96, stop_tokens=stop)
        if steps:
            collected.append((prompt, response, steps))
    return collected


@pytest.fixture(scope="session")
def packed_split(labeled_data, draft_model):
    """(train, heldout) packed examples with stored hidden states."""
    examples = [pack_steps(prompt, response, steps, draft_model=draft_model)
                for prompt, response, steps in labeled_data]
    heldout_count = max(4, len(examples) // 5)
    return examples[heldout_count:], examples[:heldout_count]


@pytest.fixture(scope="session")
def trained_pv(packed_split, draft_model):
    train, _ = packed_split
    pv = PreVerifier(d_model=draft_model.hidden_dim, heads=4, max_positions=64,
                     seed=21, vocab_size=draft_model.vocab_size,
                     context_len=draft_model.context_len)
    train_preverifier(pv, train, TrainHyperparams(lr=2e-3, epochs=8, batch_size=4, seed=3))
    return pv


@pytest.fixture(scope="session")
def fresh_pv(draft_model):
    """Randomly initialized pre-verifier (never trained)."""
    return PreVerifier(d_model=draft_model.hidden_dim, heads=4, max_positions=64,
                       seed=77, vocab_size=draft_model.vocab_size,
                       context_len=draft_model.context_len)


def random_tabular_pair(seed: int, vocab_size: int):
    gen = np.random.default_rng(seed)
    target = TabularLM.random(vocab_size, gen, concentration=0.8)
    draft = TabularLM.random(vocab_size, gen, concentration=0.8)
    return target, draft
