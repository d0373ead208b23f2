"""Halting criteria, threshold growth, the pre-verifier, and adaptive decoding."""

import numpy as np
import pytest
import torch

from adaspec import rng
from adaspec.errors import ArgumentError, ConfigError
from adaspec.halting import (HaltConfig, HeuristicPolicy, PacerPolicy,
                             PreVerifier, grow_threshold, halt_decision,
                             heuristic_halt_entropy, heuristic_halt_prob,
                             load_preverifier, pacer_generate, save_preverifier)
from adaspec.models import TabularLM
from adaspec.specdec import (DecodeConfig, DraftToken, greedy_generate,
                             speculative_loop)

from conftest import random_tabular_pair
from oracles import (blockwise_chain_enumerator, sd_marginals_via_kernels,
                     target_marginals)


def make_pv(d_model=8, seed=0, max_positions=16, heads=2, **kw):
    return PreVerifier(d_model=d_model, heads=heads, max_positions=max_positions,
                       seed=seed, **kw)


def make_draft(token, hidden, position):
    return DraftToken(token=token, dist=np.array([0.5, 0.5]),
                      hidden=np.asarray(hidden, dtype=np.float64), position=position)


class TestHaltDecision:
    def test_mean_boundary_stops_on_equal(self):
        decision = halt_decision([0.9, 0.8, 0.4], 0.7, "mean")
        assert decision.aggregate == pytest.approx(0.7)
        assert decision.stop

    def test_any_stops_on_minimum(self):
        assert halt_decision([0.9, 0.8, 0.4], 0.7, "any").stop

    def test_mean_continues_above_threshold(self):
        decision = halt_decision([0.9, 0.8, 0.75], 0.7, "mean")
        assert not decision.stop
        assert decision.aggregate == pytest.approx(0.8166666666)

    def test_last_uses_final_score(self):
        assert halt_decision([0.1, 0.1, 0.9], 0.7, "last").stop is False
        assert halt_decision([0.9, 0.9, 0.1], 0.7, "last").stop is True

    def test_empty_scores_rejected(self):
        with pytest.raises(ArgumentError):
            halt_decision([], 0.5, "mean")

    def test_equal_scores_make_criteria_agree(self):
        for value in (0.2, 0.5, 0.9):
            for threshold in (0.1, 0.5, 0.9):
                flags = {c: halt_decision([value] * 4, threshold, c).stop
                         for c in ("mean", "any", "last")}
                # mean stops on <=, the others on <; agreement up to the boundary
                if value != threshold:
                    assert len(set(flags.values())) == 1


class TestGrowThreshold:
    def test_two_growths(self):
        t = grow_threshold(grow_threshold(0.70, 1.05), 1.05)
        assert t == pytest.approx(0.77175, abs=1e-12)

    def test_growth_one_is_bitwise_identity(self):
        for t in (0.3, 0.5, 0.7, 0.95):
            assert grow_threshold(t, 1.0) == t

    def test_threshold_above_one_forces_stop(self):
        t = grow_threshold(0.95, 1.1)
        assert t == pytest.approx(1.045)
        assert halt_decision([1.0, 1.0, 1.0, 1.0], t, "mean").stop

    def test_schedule_matches_closed_form(self):
        t0, rho = 0.70, 1.05
        t = t0
        for k in range(40):
            expected = t0 * rho ** k
            assert abs(t - expected) / expected < 1e-12
            t = grow_threshold(t, rho)

    def test_shrinking_factor_rejected(self):
        with pytest.raises(ArgumentError):
            grow_threshold(0.5, 0.99)


class TestHeuristics:
    def test_prob_confident_continues(self):
        d = DraftToken(token=0, dist=np.array([0.99, 0.01]), hidden=np.zeros(2),
                       position=1)
        assert heuristic_halt_prob([d], 0.3) is False

    def test_prob_uncertain_stops(self):
        d = DraftToken(token=1, dist=np.array([0.9, 0.1]), hidden=np.zeros(2),
                       position=1)
        assert heuristic_halt_prob([d], 0.3) is True

    def test_entropy_uniform_stops(self):
        d = DraftToken(token=2, dist=np.full(4, 0.25), hidden=np.zeros(2), position=1)
        assert heuristic_halt_entropy([d], 1.5) is True

    def test_entropy_one_hot_continues(self):
        d = DraftToken(token=0, dist=np.array([1.0, 0.0, 0.0]), hidden=np.zeros(2),
                       position=1)
        assert heuristic_halt_entropy([d], 0.5) is False


class TestPreVerifier:
    def test_zeroed_head_scores_half(self):
        pv = make_pv()
        with torch.no_grad():
            pv.head.weight.zero_()
            pv.head.bias.zero_()
        cache = pv.new_cache()
        scores = pv.preverify_block(np.random.default_rng(0).normal(size=(3, 8)),
                                    [1, 2, 3], cache)
        assert np.array_equal(scores, np.full(3, 0.5))

    def test_position_sensitivity(self):
        pv = make_pv(seed=3)
        hiddens = np.random.default_rng(1).normal(size=(4, 8))
        s1 = pv.preverify_block(hiddens, [1, 2, 3, 4], pv.new_cache())
        s2 = pv.preverify_block(hiddens, [5, 6, 7, 8], pv.new_cache())
        assert np.abs(s1 - s2).max() > 1e-9

    def test_zeroed_position_table_is_position_invariant(self):
        pv = make_pv(seed=4)
        with torch.no_grad():
            pv.pos_table.zero_()
        hiddens = np.random.default_rng(2).normal(size=(4, 8))
        s1 = pv.preverify_block(hiddens, [1, 2, 3, 4], pv.new_cache())
        s2 = pv.preverify_block(hiddens, [9, 10, 11, 12], pv.new_cache())
        assert np.array_equal(s1, s2)

    def test_scope_changes_second_round(self):
        pv = make_pv(seed=5)
        gen = np.random.default_rng(3)
        block1 = gen.normal(size=(2, 8))
        block2 = gen.normal(size=(2, 8))
        outs = {}
        for scope in ("full", "local_draft", "local_block"):
            cache = pv.new_cache()
            pv.append_context(gen.normal(size=(3, 8)), cache)
            pv.preverify_block(block1, [1, 2], cache, scope=scope)
            outs[scope] = pv.preverify_block(block2, [3, 4], cache, scope=scope)
        assert np.abs(outs["full"] - outs["local_block"]).max() > 1e-9
        assert np.abs(outs["full"] - outs["local_draft"]).max() > 1e-9
        assert np.abs(outs["local_draft"] - outs["local_block"]).max() > 1e-9

    def test_block_partition_invariance(self):
        # scoring one window as a single block or as two halves must agree
        pv = make_pv(seed=6)
        gen = np.random.default_rng(4)
        context = gen.normal(size=(5, 8))
        window = gen.normal(size=(4, 8))
        cache = pv.new_cache()
        pv.append_context(context, cache)
        whole = pv.preverify_block(window, [1, 2, 3, 4], cache)
        cache2 = pv.new_cache()
        pv.append_context(context, cache2)
        first = pv.preverify_block(window[:2], [1, 2], cache2)
        second = pv.preverify_block(window[2:], [3, 4], cache2)
        assert np.abs(np.concatenate([first, second]) - whole).max() < 1e-12

    def test_position_beyond_table_rejected(self):
        pv = make_pv(max_positions=4)
        with pytest.raises(ConfigError):
            pv.preverify_block(np.zeros((1, 8)), [5], pv.new_cache())

    def test_cache_rollback_to_context(self):
        pv = make_pv()
        cache = pv.new_cache()
        pv.append_context(np.zeros((3, 8)), cache)
        pv.preverify_block(np.zeros((2, 8)), [1, 2], cache)
        assert len(cache) == 5
        cache.rollback_to_context()
        assert len(cache) == 3 and cache.context_count == 3

    def test_sinusoidal_mode(self):
        pv = make_pv(pos_mode="sinusoidal")
        assert not pv.pos_table.requires_grad
        emb = pv.position_embedding([1, 2])
        assert torch.isfinite(emb).all()

    def test_checkpoint_roundtrip(self, tmp_path):
        pv = make_pv(seed=8)
        path = save_preverifier(tmp_path / "pv.ckpt", pv)
        loaded = load_preverifier(path)
        hiddens = np.random.default_rng(5).normal(size=(2, 8))
        a = pv.preverify_block(hiddens, [1, 2], pv.new_cache())
        b = loaded.preverify_block(hiddens, [1, 2], loaded.new_cache())
        # float32 storage; scores agree to storage precision
        assert np.abs(a - b).max() < 1e-5


class StubCache:
    def rollback_to_context(self):
        pass


class StubPv:
    """Scripted scores; records the positions it was asked about."""

    max_positions = 64

    def __init__(self, script):
        self.script = list(script)
        self.positions_seen = []

    def new_cache(self):
        return StubCache()

    def append_context(self, hiddens, cache):
        pass

    def preverify_block(self, hiddens, positions, cache, scope="full"):
        self.positions_seen.append(list(positions))
        return np.asarray(self.script.pop(0), dtype=np.float64)


def drive_policy_step(policy, block_size, scores_rounds):
    """Mimic the engine's drafting loop for one step; returns drafted count."""
    drafted = 0
    while True:
        quota = policy.next_quota(drafted)
        if quota <= 0:
            break
        drafts = [make_draft(0, np.zeros(2), drafted + i + 1) for i in range(quota)]
        policy.observe_block(drafts)
        drafted += quota
    return drafted


class TestPacerPolicy:
    def test_growth_schedule_and_reset(self):
        # t0=0.5, rho=1.2: thresholds 0.5, 0.6, 0.72; scores 0.7 stop in round 3
        halt = HaltConfig(block_size=2, threshold=0.5, growth=1.2, max_rounds=8,
                          criterion="mean")
        pv = StubPv([[0.7, 0.7]] * 6)
        policy = PacerPolicy(pv, halt)
        policy.start_step(0, [0])
        assert drive_policy_step(policy, 2, None) == 6
        assert policy.preverify_calls == 3
        # threshold must reset: the second step repeats the same pattern
        policy.end_step(0, [])
        policy.start_step(1, [0])
        assert drive_policy_step(policy, 2, None) == 6

    def test_round_cap(self):
        halt = HaltConfig(block_size=2, threshold=0.1, growth=1.0, max_rounds=3)
        pv = StubPv([[0.99, 0.99]] * 3)
        policy = PacerPolicy(pv, halt)
        policy.start_step(0, [0])
        assert drive_policy_step(policy, 2, None) == 6
        assert policy.preverify_calls == 3

    def test_positions_are_step_local(self):
        halt = HaltConfig(block_size=3, threshold=0.9, growth=1.0, max_rounds=2)
        pv = StubPv([[0.95] * 3, [0.1] * 3] * 2)
        policy = PacerPolicy(pv, halt)
        policy.start_step(0, [0])
        drive_policy_step(policy, 3, None)
        policy.end_step(1, [])
        policy.start_step(1, [0, 1])
        drive_policy_step(policy, 3, None)
        assert pv.positions_seen == [[1, 2, 3], [4, 5, 6], [1, 2, 3], [4, 5, 6]]

    def test_position_table_capacity_checked(self):
        halt = HaltConfig(block_size=8, threshold=0.5, max_rounds=9)
        with pytest.raises(ConfigError):
            PacerPolicy(make_pv(max_positions=16), halt)


class TestPacerGenerate:
    def test_high_biased_head_drafts_to_cap(self):
        target, draft = random_tabular_pair(40, 3)
        pv = make_pv(d_model=3, heads=1, seed=11)
        with torch.no_grad():
            pv.head.weight.zero_()
            pv.head.bias.fill_(6.0)  # sigmoid ~ 0.998: never halts early
        halt = HaltConfig(block_size=2, threshold=0.7, growth=1.05, max_rounds=3)
        cfg = DecodeConfig(mode="stochastic", gamma=1, max_new_tokens=30, seed=3)
        _, records = pacer_generate(target, draft, pv, [0], halt, cfg)
        for rec in records[:-1]:
            assert rec.gamma == 6
            assert rec.rounds == 3

    def test_low_biased_head_drafts_one_block(self):
        target, draft = random_tabular_pair(41, 3)
        pv = make_pv(d_model=3, heads=1, seed=12)
        with torch.no_grad():
            pv.head.weight.zero_()
            pv.head.bias.fill_(-6.0)
        halt = HaltConfig(block_size=2, threshold=0.7, growth=1.05, max_rounds=3)
        cfg = DecodeConfig(mode="stochastic", gamma=1, max_new_tokens=30, seed=4)
        _, records = pacer_generate(target, draft, pv, [0], halt, cfg)
        for rec in records[:-1]:
            assert rec.gamma == 2
            assert rec.rounds == 1
            assert rec.preverify_forwards == 1

    def test_draft_counts_are_block_multiples(self, target_model, draft_model,
                                              trained_pv, bench_prompts, newline_id):
        halt = HaltConfig()
        cfg = DecodeConfig(mode="greedy", max_new_tokens=48,
                           stop_tokens=frozenset({newline_id}))
        _, records = pacer_generate(target_model, draft_model, trained_pv,
                                    bench_prompts[0], halt, cfg)
        for rec in records:
            if rec.gamma and not any(t == newline_id for t in rec.emitted[:-1]):
                assert rec.rounds >= 1
        # steps not cut by the stop token draft whole blocks
        clean = [r for r in records[:-1] if newline_id not in r.emitted]
        for rec in clean:
            assert rec.gamma % halt.block_size == 0 or rec.gamma == 0

    def test_greedy_output_equals_target_greedy(self, target_model, draft_model,
                                                trained_pv, fresh_pv, bench_prompts,
                                                newline_id):
        stop = frozenset({newline_id})
        cfg = DecodeConfig(mode="greedy", max_new_tokens=48, stop_tokens=stop)
        for prompt in bench_prompts[:6]:
            reference = greedy_generate(target_model, prompt, 48, stop)
            for pv in (trained_pv, fresh_pv):
                out, _ = pacer_generate(target_model, draft_model, pv, prompt,
                                        HaltConfig(), cfg)
                assert out == reference

    def test_width_mismatch_rejected(self, target_model, draft_model):
        pv = make_pv(d_model=16)
        with pytest.raises(ConfigError):
            pacer_generate(target_model, draft_model, pv, [0], HaltConfig(),
                           DecodeConfig())


class TestPacerLosslessness:
    def _oracle_marginals(self, target, draft, pv, halt, s0, n):
        """Analytic marginals with halting replayed through the engine's scorer."""
        memo = {}

        def hidden_of(prev_token):
            h = np.zeros(draft.hidden_dim)
            h[prev_token] = 1.0
            return h

        def score_block(state, chain, round_index):
            key = (state, chain[:(round_index + 1) * halt.block_size])
            if key not in memo:
                cache = pv.new_cache()
                scores = None
                for k in range(round_index + 1):
                    block = chain[k * halt.block_size:(k + 1) * halt.block_size]
                    prevs = ((state,) + chain)[k * halt.block_size:
                                               k * halt.block_size + len(block)]
                    hiddens = np.stack([hidden_of(p) for p in prevs])
                    positions = list(range(k * halt.block_size + 1,
                                           k * halt.block_size + len(block) + 1))
                    scores = pv.preverify_block(hiddens, positions, cache,
                                                scope="local_draft")
                memo[key] = scores
            return memo[key]

        def decide(scores, threshold):
            return halt_decision(scores, threshold, halt.criterion).stop

        enum = blockwise_chain_enumerator(draft.table, halt, score_block, decide)
        return sd_marginals_via_kernels(target.table, draft.table, s0, n, enum)

    @pytest.mark.parametrize("seed", [0, 3])
    def test_analytic_marginals_match_target(self, seed):
        target, draft = random_tabular_pair(200 + seed, 3)
        pv = make_pv(d_model=3, heads=1, seed=seed)
        halt = HaltConfig(block_size=2, threshold=0.5, growth=1.05, max_rounds=2,
                          scope="local_draft")
        ours = self._oracle_marginals(target, draft, pv, halt, 0, 6)
        reference = target_marginals(target.table, 0, 6)
        assert np.abs(ours - reference).max() < 1e-10

    def test_engine_frequencies_match_oracle(self):
        target, draft = random_tabular_pair(207, 3)
        pv = make_pv(d_model=3, heads=1, seed=9)
        halt = HaltConfig(block_size=2, threshold=0.5, growth=1.05, max_rounds=2,
                          scope="local_draft")
        marginals = self._oracle_marginals(target, draft, pv, halt, 1, 2)
        runs = 1500
        counts = np.zeros((2, 3))
        for i in range(runs):
            cfg = DecodeConfig(mode="stochastic", max_new_tokens=2, seed=50_000 + i)
            out, _ = pacer_generate(target, draft, pv, [1], halt, cfg)
            counts[0, out[0]] += 1
            counts[1, out[1]] += 1
        for pos in range(2):
            for v in range(3):
                p = marginals[pos, v]
                sigma = max(np.sqrt(runs * p * (1 - p)), 1.0)
                assert abs(counts[pos, v] - runs * p) < 4.5 * sigma


class TestHeuristicPolicies:
    def test_prob_threshold_one_gives_single_drafts(self):
        target, draft = random_tabular_pair(60, 4)
        cfg = DecodeConfig(mode="stochastic", max_new_tokens=20, seed=8)
        out, records = speculative_loop(target, draft, [0], cfg,
                                        HeuristicPolicy("prob", 1.0, max_draft=8))
        assert all(r.gamma == 1 for r in records)
        assert all(r.preverify_forwards == 0 for r in records)

    def test_entropy_generous_threshold_hits_cap(self):
        target, draft = random_tabular_pair(61, 4)
        cfg = DecodeConfig(mode="stochastic", max_new_tokens=20, seed=9)
        out, records = speculative_loop(target, draft, [0], cfg,
                                        HeuristicPolicy("entropy", 100.0, max_draft=5))
        assert all(r.gamma == 5 for r in records[:-1])
