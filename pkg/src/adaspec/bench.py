"""Forward-pass accounting, the latency cost model, oracles and sweeps.

Speed is simulated from forward-pass counts and fixed per-pass costs rather
than measured, so desk-scale results are hardware-independent and
deterministic; the autoregressive baseline for speedup is one target forward
per emitted token.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .errors import ArgumentError, ConfigError
from .halting import HaltConfig, HeuristicPolicy, PacerPolicy, PreVerifier
from .records import StepRecord
from .sampling import greedy
from .specdec import (DecodeConfig, DraftLengthPolicy, FixedWindowPolicy,
                      greedy_generate, speculative_loop)

DEFAULT_ORACLE_HORIZON = 50


@dataclass(frozen=True)
class CostModel:
    """Milliseconds per forward pass; defaults are measured 1.3B/33B latencies."""

    c_draft: float = 16.52
    c_target: float = 67.31
    c_preverify: float = 1.81

    def __post_init__(self):
        if min(self.c_draft, self.c_target, self.c_preverify) <= 0:
            raise ConfigError("all forward costs must be positive")


@dataclass
class BenchReport:
    total_tokens: int
    tau: float
    draft_forwards: int
    target_forwards: int
    preverify_forwards: int
    sim_ms: float
    tokens_per_s: float
    speedup: float
    shares: dict[str, float] = field(default_factory=dict)
    wall_ms: float | None = None  # measured, excluded from report tables

    def row(self) -> dict:
        return {
            "tokens": self.total_tokens,
            "tau": round(self.tau, 6),
            "draft_forwards": self.draft_forwards,
            "target_forwards": self.target_forwards,
            "preverify_forwards": self.preverify_forwards,
            "sim_ms": round(self.sim_ms, 6),
            "tokens_per_s": round(self.tokens_per_s, 6),
            "speedup": round(self.speedup, 6),
        }


def compute_tau(records: list[StepRecord]) -> float:
    """Average acceptance length: accepted draft tokens per target forward."""
    target = sum(r.target_forwards for r in records)
    if target == 0:
        return 0.0
    return sum(r.accepted for r in records) / target


def simulate_cost(records: list[StepRecord], cm: CostModel) -> BenchReport:
    """Price a run's forward passes under the cost model."""
    if not records:
        raise ArgumentError("simulate_cost needs at least one record")
    drafts = sum(r.draft_forwards for r in records)
    targets = sum(r.target_forwards for r in records)
    previews = sum(r.preverify_forwards for r in records)
    tokens = sum(r.emitted_count for r in records)
    draft_ms = drafts * cm.c_draft
    target_ms = targets * cm.c_target
    preverify_ms = previews * cm.c_preverify
    total_ms = draft_ms + target_ms + preverify_ms
    if total_ms <= 0:
        raise ArgumentError("simulated time is zero; no forward passes recorded")
    return BenchReport(
        total_tokens=tokens,
        tau=compute_tau(records),
        draft_forwards=drafts,
        target_forwards=targets,
        preverify_forwards=previews,
        sim_ms=total_ms,
        tokens_per_s=tokens / total_ms * 1000.0,
        speedup=tokens * cm.c_target / total_ms,
        shares={
            "draft": draft_ms / total_ms,
            "target": target_ms / total_ms,
            "preverify": preverify_ms / total_ms,
        },
    )


def oracle_max_accept(target, draft, prefix: list[int], horizon: int,
                      stop_tokens: frozenset[int] = frozenset(),
                      response: list[int] | None = None) -> int:
    """Longest greedy draft prefix matching the target's greedy continuation.

    `response` short-circuits recomputing the target continuation when the
    caller already has it.
    """
    if horizon < 1:
        raise ArgumentError("horizon must be >= 1")
    if response is None:
        response = greedy_generate(target, prefix, horizon, stop_tokens)
    limit = min(horizon, len(response))
    cache = draft.new_cache()
    chunk = list(prefix)
    matched = 0
    while matched < limit:
        probs, _, _ = draft.forward(chunk, cache)
        token = greedy(probs[-1])
        if token != response[matched]:
            break
        matched += 1
        if token in stop_tokens:
            break
        chunk = [token]
    return matched


class OracleWindowPolicy(DraftLengthPolicy):
    """Drafts exactly the maximum acceptance length each step (greedy only)."""

    def __init__(self, draft, response: list[int], prompt_len: int, horizon: int,
                 stop_tokens: frozenset[int]):
        self.draft = draft
        self.response = response
        self.prompt_len = prompt_len
        self.horizon = horizon
        self.stop_tokens = stop_tokens
        self._quota = 0

    def start_step(self, step_index: int, committed: list[int]) -> None:
        done = len(committed) - self.prompt_len
        remaining = self.response[done:]
        limit = min(self.horizon, len(remaining))
        cache = self.draft.new_cache()
        chunk = list(committed)
        matched = 0
        while matched < limit:
            probs, _, _ = self.draft.forward(chunk, cache)
            token = greedy(probs[-1])
            if token != remaining[matched]:
                break
            matched += 1
            if token in self.stop_tokens:
                break
            chunk = [token]
        self._quota = matched

    def next_quota(self, drafted: int) -> int:
        quota, self._quota = self._quota, 0
        return quota


def oracle_dynamic_run(target, draft, prefix: list[int], config: DecodeConfig,
                       horizon: int = DEFAULT_ORACLE_HORIZON,
                       ) -> tuple[list[int], list[StepRecord]]:
    """Decode with per-step windows set to the max acceptance length.

    A step whose best window is zero performs no draft forwards and one
    target forward. The oracle's own look-ahead forwards are free (perfect
    foresight); only the executed drafts are recorded.
    """
    if config.mode != "greedy":
        raise ArgumentError("the max-acceptance oracle is defined for greedy mode")
    response = greedy_generate(target, prefix, config.max_new_tokens,
                               config.stop_tokens)
    policy = OracleWindowPolicy(draft, response, len(prefix), horizon,
                                config.stop_tokens)
    return speculative_loop(target, draft, prefix, config, policy)


@dataclass
class PolicyRun:
    name: str
    params: dict
    records: list[StepRecord]
    report: BenchReport
    outputs: list[list[int]]


def run_policy(target, draft, prompts: list[list[int]], config: DecodeConfig,
               make_policy, cm: CostModel, name: str, params: dict,
               pv: PreVerifier | None = None, horizon: int = DEFAULT_ORACLE_HORIZON,
               ) -> PolicyRun:
    """Decode every prompt under one policy; aggregate records and price them."""
    records: list[StepRecord] = []
    outputs: list[list[int]] = []
    started = time.perf_counter()
    for prompt in prompts:
        if name == "oracle":
            out, recs = oracle_dynamic_run(target, draft, prompt, config, horizon)
        else:
            out, recs = speculative_loop(target, draft, prompt, config, make_policy())
        outputs.append(out)
        records.extend(recs)
    report = simulate_cost(records, cm)
    report.wall_ms = (time.perf_counter() - started) * 1000.0
    return PolicyRun(name=name, params=params, records=records, report=report,
                     outputs=outputs)


def make_policy_factory(policy: str, config: DecodeConfig,
                        halt: HaltConfig | None = None,
                        pv: PreVerifier | None = None,
                        heuristic_threshold: float = 0.3,
                        max_draft: int | None = None):
    """Policy constructor for --policy {fixed|pacer|prob|entropy}."""
    if policy == "fixed":
        return lambda: FixedWindowPolicy(config.gamma)
    if policy == "pacer":
        if pv is None or halt is None:
            raise ConfigError("pacer policy needs a pre-verifier and halt config")
        return lambda: PacerPolicy(pv, halt)
    if policy in ("prob", "entropy"):
        cap = max_draft if max_draft is not None else (
            halt.block_size * halt.max_rounds if halt else 32)
        return lambda: HeuristicPolicy(policy, heuristic_threshold, cap)
    raise ConfigError(f"unknown policy {policy!r}")


def sweep_fixed_gamma(target, draft, prompts: list[list[int]], gammas: list[int],
                      cm: CostModel, config: DecodeConfig) -> dict:
    """Per-gamma reports plus the argmax tokens/s (lowest gamma wins ties)."""
    if not gammas:
        raise ArgumentError("gamma range is empty")
    rows = []
    runs = {}
    for gamma in gammas:
        cfg = DecodeConfig(mode=config.mode, gamma=gamma,
                           max_new_tokens=config.max_new_tokens,
                           stop_tokens=config.stop_tokens, seed=config.seed)
        run = run_policy(target, draft, prompts, cfg,
                         lambda g=gamma: FixedWindowPolicy(g), cm,
                         name="fixed", params={"gamma": gamma})
        runs[gamma] = run
        row = {"gamma": gamma}
        row.update(run.report.row())
        rows.append(row)
    best = max(rows, key=lambda r: (r["tokens_per_s"], -r["gamma"]))
    return {"rows": rows, "best_gamma": best["gamma"], "runs": runs}


def ablation_sweeps(target, draft, pv: PreVerifier, prompts: list[list[int]],
                    cm: CostModel, config: DecodeConfig,
                    base: HaltConfig | None = None) -> dict[str, list[dict]]:
    """1-D sweeps over block size, threshold and growth factor."""
    base = base or HaltConfig()
    tables: dict[str, list[dict]] = {"block_size": [], "threshold": [], "growth": []}

    def run_with(halt: HaltConfig, key: str, value) -> dict:
        run = run_policy(target, draft, prompts, config,
                         lambda: PacerPolicy(pv, halt), cm,
                         name="pacer", params={key: value})
        row = {key: value}
        row.update(run.report.row())
        return row

    for b in range(1, 8):
        halt = HaltConfig(block_size=b, threshold=base.threshold, growth=base.growth,
                          max_rounds=base.max_rounds, criterion=base.criterion,
                          scope=base.scope)
        tables["block_size"].append(run_with(halt, "b", b))
    for t in [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80]:
        halt = HaltConfig(block_size=base.block_size, threshold=t, growth=base.growth,
                          max_rounds=base.max_rounds, criterion=base.criterion,
                          scope=base.scope)
        tables["threshold"].append(run_with(halt, "t", t))
    for rho100 in range(100, 110):
        rho = rho100 / 100.0
        halt = HaltConfig(block_size=base.block_size, threshold=base.threshold,
                          growth=rho, max_rounds=base.max_rounds,
                          criterion=base.criterion, scope=base.scope)
        tables["growth"].append(run_with(halt, "rho", rho))
    return tables


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_long_csv(rows: list[dict], config_keys: list[str]) -> str:
    """Long format: one (config, metric, value) row per measurement."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "metric", "value"])
    for row in rows:
        config = "/".join(f"{k}={row[k]}" for k in config_keys if k in row)
        for key, value in row.items():
            if key not in config_keys:
                writer.writerow([config, key, value])
    return buf.getvalue()
