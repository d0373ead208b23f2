"""Pre-verifier training on packed sequences, and classifier metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng
from .errors import ArgumentError, MetricError, TrainingError
from .halting import PreVerifier
from .packing import DRAFT, PackedExample, packed_logits


@dataclass
class TrainHyperparams:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    balance_negatives: bool = False  # cap the 0-run mass at 2x the 1-run mass

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError("lr must be positive")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")


@dataclass
class PvTrainResult:
    final_loss: float
    epoch_losses: list[float]
    heldout_auc: float | None
    heldout_accuracy: float | None


def _negative_weight(dataset: list[PackedExample], cap: float = 2.0) -> float:
    pos = sum(int((ex.labels[ex.draft_slots] == 1).sum()) for ex in dataset)
    neg = sum(int((ex.labels[ex.draft_slots] == 0).sum()) for ex in dataset)
    if neg == 0 or pos == 0:
        return 1.0
    return min(1.0, cap * pos / neg)


def train_preverifier(pv: PreVerifier, dataset: list[PackedExample],
                      hp: TrainHyperparams, draft_model=None,
                      heldout: list[PackedExample] | None = None) -> PvTrainResult:
    """Binary cross-entropy over draft slots only; prefix slots carry no loss.

    Hidden states are recomputed through the frozen draft model inside the
    packed forward unless the examples store them. Deterministic under
    hp.seed.
    """
    if not dataset:
        raise ArgumentError("training dataset is empty")
    opt = torch.optim.AdamW(pv.parameters(), lr=hp.lr, betas=hp.betas)
    shuffle = rng.substream(hp.seed, rng.TRAIN_SHUFFLE)
    neg_weight = _negative_weight(dataset) if hp.balance_negatives else 1.0

    epoch_losses: list[float] = []
    step = 0
    for _ in range(hp.epochs):
        order = shuffle.permutation(len(dataset))
        total_loss = 0.0
        total_positions = 0
        for start in range(0, len(order), hp.batch_size):
            batch = [dataset[i] for i in order[start:start + hp.batch_size]]
            opt.zero_grad()
            batch_positions = 0
            batch_loss = 0.0
            losses = []
            for ex in batch:
                logits = packed_logits(pv, ex, draft_model)
                slots = torch.as_tensor(ex.draft_slots)
                target = torch.as_tensor(ex.labels[ex.draft_slots], dtype=torch.float64)
                weight = torch.where(target > 0.5, 1.0, neg_weight)
                loss = torch.nn.functional.binary_cross_entropy_with_logits(
                    logits[slots], target, weight=weight, reduction="sum")
                losses.append(loss)
                batch_positions += int(slots.numel())
            loss = torch.stack(losses).sum() / max(batch_positions, 1)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingError("pre-verifier loss diverged", step=step)
            loss.backward()
            opt.step()
            step += 1
            total_loss += value * batch_positions
            total_positions += batch_positions
        epoch_losses.append(total_loss / max(total_positions, 1))

    auc = acc = None
    if heldout:
        metrics = evaluate_classifier(pv, heldout, draft_model)
        auc, acc = metrics.auc, metrics.accuracy
    return PvTrainResult(final_loss=epoch_losses[-1], epoch_losses=epoch_losses,
                         heldout_auc=auc, heldout_accuracy=acc)


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the Mann-Whitney rank statistic, with tie correction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


@dataclass
class ClassifierMetrics:
    accuracy: float
    auc: float
    calibration: list[dict] = field(default_factory=list)
    positions: int = 0


def pv_scores(pv: PreVerifier, dataset: list[PackedExample],
              draft_model=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scores, labels, draft positions) across every draft slot."""
    scores, labels, positions = [], [], []
    with torch.no_grad():
        for ex in dataset:
            logits = packed_logits(pv, ex, draft_model)
            slots = ex.draft_slots
            scores.append(torch.sigmoid(logits[torch.as_tensor(slots)]).numpy())
            labels.append(ex.labels[slots])
            positions.append(ex.draft_pos[slots])
    return (np.concatenate(scores), np.concatenate(labels).astype(np.int8),
            np.concatenate(positions))


def evaluate_classifier(pv: PreVerifier, heldout: list[PackedExample],
                        draft_model=None, bins: int = 10) -> ClassifierMetrics:
    """Accuracy, rank AUC and calibration bins over held-out draft slots."""
    if not heldout:
        raise ArgumentError("held-out set is empty")
    scores, labels, _ = pv_scores(pv, heldout, draft_model)
    accuracy = float(((scores >= 0.5).astype(np.int8) == labels).mean())
    auc = rank_auc(scores, labels)
    calibration = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (scores >= lo) & (scores < hi if hi < 1.0 else scores <= hi)
        if in_bin.any():
            calibration.append({
                "lo": float(lo), "hi": float(hi),
                "count": int(in_bin.sum()),
                "mean_score": float(scores[in_bin].mean()),
                "positive_rate": float(labels[in_bin].mean()),
            })
    return ClassifierMetrics(accuracy=accuracy, auc=auc, calibration=calibration,
                             positions=len(labels))


def acceptance_by_position(dataset: list[PackedExample],
                           min_count: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(positions, empirical acceptance rate) from labeled data."""
    counts: dict[int, list[int]] = {}
    for ex in dataset:
        slots = ex.draft_slots
        for pos, label in zip(ex.draft_pos[slots], ex.labels[slots]):
            counts.setdefault(int(pos), []).append(int(label))
    positions = sorted(p for p, vals in counts.items() if len(vals) >= min_count)
    rates = np.array([np.mean(counts[p]) for p in positions])
    return np.array(positions), rates
