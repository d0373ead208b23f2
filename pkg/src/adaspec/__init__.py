"""Speculative decoding with adaptive draft lengths.

A draft model proposes token windows, a target model verifies them in one
parallel pass, and a trainable blockwise pre-verification layer decides how
long each window should be.
"""

__version__ = "0.1.0"

from .bench import BenchReport, CostModel, compute_tau, oracle_dynamic_run, simulate_cost
from .halting import HaltConfig, HaltDecision, PreVerifier, halt_decision, pacer_generate
from .models import ModelSpec, TabularLM, TinyTransformerLM
from .records import StepRecord
from .specdec import DecodeConfig, DraftToken, VerifyOutcome, sd_generate, verify

__all__ = [
    "BenchReport", "CostModel", "DecodeConfig", "DraftToken", "HaltConfig",
    "HaltDecision", "ModelSpec", "PreVerifier", "StepRecord", "TabularLM",
    "TinyTransformerLM", "VerifyOutcome", "compute_tau", "halt_decision",
    "oracle_dynamic_run", "pacer_generate", "sd_generate", "simulate_cost",
    "verify",
]
