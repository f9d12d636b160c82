"""Binary-classification metrics: AUC, MCC, precision/recall/F1, per-class rates.

Conventions for degenerate denominators are fixed here and documented on
each function; evaluation reports rely on them being stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np


def tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group-average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative.

    Mann-Whitney formulation; ties count one half. Raises on single-class
    input rather than returning NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"auc: scores and labels must be matching 1-D arrays, got "
            f"{scores.shape} and {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: both classes must be present")
    ranks = tied_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"confusion: shape mismatch {p.shape} vs {y.shape}")
    return ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
    )


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation coefficient; any zero factor in the root gives 0."""
    num = c.tp * c.tn - c.fp * c.fn
    factors = [(c.tp + c.fp), (c.tp + c.fn), (c.tn + c.fp), (c.tn + c.fn)]
    if any(f == 0 for f in factors):
        return 0.0
    return float(num / math.sqrt(math.prod(float(f) for f in factors)))


def prf_accuracy(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(precision, recall, f1, accuracy); every 0/0 resolves to 0."""
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) else 0.0)
    accuracy = (c.tp + c.tn) / c.total if c.total else 0.0
    return float(precision), float(recall), float(f1), float(accuracy)


def per_class_proportion(predictions: Sequence[int], labels: Sequence[int],
                         source_classes: Sequence[str]) -> Dict[str, float]:
    """Fraction of each source class whose binary prediction is correct."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if not (len(p) == len(y) == len(source_classes)):
        raise ValueError("per_class_proportion: length mismatch")
    out: Dict[str, float] = {}
    classes = sorted(set(source_classes))
    src = np.asarray(source_classes)
    for cls in classes:
        mask = src == cls
        out[cls] = float((p[mask] == y[mask]).mean())
    return out


@dataclass
class MetricsReport:
    """All six table metrics plus the confusion matrix behind them."""

    auc: float
    recall: float
    accuracy: float
    f1: float
    mcc: float
    precision: float
    confusion: ConfusionCounts
    per_class: Dict[str, float] = field(default_factory=dict)

    COLUMNS = ("AUC", "Recall", "Accuracy", "F1 Score", "MCC", "Precision")

    def as_dict(self) -> dict:
        return {
            "auc": self.auc,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "mcc": self.mcc,
            "precision": self.precision,
            "confusion": self.confusion.as_dict(),
            "per_class_proportion": dict(sorted(self.per_class.items())),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent)

    def table_row(self, name: str) -> str:
        """Percentages with two decimals for eyeball comparison."""
        vals = [self.auc, self.recall, self.accuracy, self.f1, self.mcc,
                self.precision]
        cells = "".join(f"{100.0 * v:>10.2f}" for v in vals)
        return f"{name:<24s}{cells}"


def evaluate(scores: Sequence[float], predictions: Sequence[int],
             labels: Sequence[int],
             source_classes: Optional[Sequence[str]] = None) -> MetricsReport:
    """Assemble the full report from scores, hard predictions, and labels."""
    c = confusion(predictions, labels)
    precision, recall, f1, accuracy = prf_accuracy(c)
    per_class = (per_class_proportion(predictions, labels, source_classes)
                 if source_classes is not None else {})
    return MetricsReport(
        auc=auc(scores, labels),
        recall=recall,
        accuracy=accuracy,
        f1=f1,
        mcc=mcc(c),
        precision=precision,
        confusion=c,
        per_class=per_class,
    )
