"""Binary classification metrics and core-wise aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def _check(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be 1D arrays of equal length")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("metrics need at least one positive and one negative")
    return y, s


def auroc(y_true, scores) -> float:
    """Mann-Whitney statistic with mid-ranks, so tied pairs count one half."""
    y, s = _check(y_true, scores)
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(y_true, scores) -> float:
    """Sum over distinct score thresholds of (recall increase) x precision."""
    y, s = _check(y_true, scores)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # keep the last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def balanced_accuracy(y_true, scores, threshold: float = 0.5) -> float:
    """Mean of sensitivity and specificity with ``score >= threshold`` as positive."""
    y, s = _check(y_true, scores)
    pred = s >= threshold
    sens = pred[y == 1].mean()
    spec = (~pred[y == 0]).mean()
    return float((sens + spec) / 2)


@dataclass
class MetricReport:
    auroc: float
    avg_precision: float
    balanced_accuracy: float
    level: str
    n_positive: int
    n_negative: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def report(y_true, scores, level: str, threshold: float = 0.5) -> MetricReport:
    y = np.asarray(y_true).astype(int)
    return MetricReport(
        auroc=auroc(y, scores),
        avg_precision=average_precision(y, scores),
        balanced_accuracy=balanced_accuracy(y, scores, threshold),
        level=level,
        n_positive=int(y.sum()),
        n_negative=int(y.size - y.sum()),
    )


@dataclass
class CorePrediction:
    core_id: str
    patch_probabilities: list[float]
    patch_classes: list[int]
    core_probability: float
    true_label: int
    involvement_percent: float
    empty: bool = False

    @classmethod
    def from_probabilities(cls, core_id, probs, true_label, involvement, threshold=0.5) -> "CorePrediction":
        probs = [float(p) for p in probs]
        classes = [int(p >= threshold) for p in probs]
        if not classes:
            return cls(core_id, [], [], float("nan"), int(true_label), float(involvement), empty=True)
        return cls(core_id, probs, classes, float(np.mean(classes)), int(true_label), float(involvement))


def predicted_involvement(pred: CorePrediction) -> float:
    """Fraction of the core's patches predicted as cancer."""
    if pred.empty or not pred.patch_classes:
        raise ValueError(f"core {pred.core_id} has no patch predictions")
    return float(np.mean(pred.patch_classes))


def passes_involvement(label: int, involvement: float, min_involvement: float) -> bool:
    return label == 0 or involvement >= min_involvement


def compute_metrics(
    preds: Sequence[CorePrediction], level: str = "core", min_involvement: float = 40.0, threshold: float = 0.5
) -> MetricReport:
    """Core- or patch-level metrics after dropping low-involvement cancer cores
    and cores without any qualifying patch."""
    kept = [p for p in preds if not p.empty and passes_involvement(p.true_label, p.involvement_percent, min_involvement)]
    if level == "core":
        y = [p.true_label for p in kept]
        s = [p.core_probability for p in kept]
    elif level == "patch":
        y = [p.true_label for p in kept for _ in p.patch_probabilities]
        s = [q for p in kept for q in p.patch_probabilities]
    else:
        raise ValueError(f"level must be 'core' or 'patch', got {level!r}")
    return report(y, s, level, threshold)
