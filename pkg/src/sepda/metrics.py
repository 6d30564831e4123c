"""Screening metrics for binary diagnosis: F1, recall, precision, AUC, Sum, Cost.

Percentages are on a 0-100 scale. Sum is the mean of recall and specificity;
Cost weighs false negatives at 0.9 and false positives at 0.1. Both formulas are
locked by :func:`reconstruct_table_row`, which must reproduce every published
reference row before they are trusted anywhere else.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise MetricsError(f"negative count {name}={getattr(self, name)}")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    recall: float
    precision: float
    auc: float
    sum: float
    cost: float
    specificity: float
    counts: ConfusionCounts

    def rounded(self) -> dict:
        """Values at the reporting precision: 2 decimals for %, 3 for AUC, 1 for Cost."""
        return {
            "f1": round(self.f1, 2),
            "recall": round(self.recall, 2),
            "precision": round(self.precision, 2),
            "auc": round(self.auc, 3),
            "sum": round(self.sum, 2),
            "cost": round(self.cost, 1),
        }

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k != "counts"}
        rec.update(asdict(self.counts))
        return rec

    def to_text(self) -> str:
        """Flat ``key=value`` record, one pair per line."""
        return "\n".join(f"{k}={v!r}" for k, v in self.to_record().items()) + "\n"


def _as_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise MetricsError(f"{name} must be one-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise MetricsError(f"{name} contains non-binary entries")
    return arr.astype(np.int64)


def confusion(hard_labels, true_labels) -> ConfusionCounts:
    pred = _as_binary(hard_labels, "hard_labels")
    true = _as_binary(true_labels, "true_labels")
    if pred.shape != true.shape:
        raise MetricsError(f"length mismatch: {pred.shape[0]} predictions vs {true.shape[0]} labels")
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (true == 1))),
        fp=int(np.sum((pred == 1) & (true == 0))),
        tn=int(np.sum((pred == 0) & (true == 0))),
        fn=int(np.sum((pred == 0) & (true == 1))),
    )


def _ratio(num: float, den: float) -> float:
    # 0/0 -> 0 so degenerate predictors still score
    return num / den if den else 0.0


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    precision = 100.0 * _ratio(counts.tp, counts.tp + counts.fp)
    recall = 100.0 * _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


def specificity(counts: ConfusionCounts) -> float:
    return 100.0 * _ratio(counts.tn, counts.tn + counts.fp)


def sum_metric(counts: ConfusionCounts) -> float:
    recall = 100.0 * _ratio(counts.tp, counts.tp + counts.fn)
    return (recall + specificity(counts)) / 2.0


def cost_metric(counts: ConfusionCounts, c_fn: float = 0.9, c_fp: float = 0.1) -> float:
    if c_fn < 0 or c_fp < 0:
        raise MetricsError("cost weights must be nonnegative")
    return c_fn * counts.fn + c_fp * counts.fp


def auc(scores, true_labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from midranks, which equals the trapezoidal ROC area.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(true_labels, "true_labels")
    if s.shape != y.shape:
        raise MetricsError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def report_from_predictions(hard_labels, scores, true_labels) -> MetricsReport:
    counts = confusion(hard_labels, true_labels)
    precision, recall, f1 = precision_recall_f1(counts)
    return MetricsReport(
        f1=f1,
        recall=recall,
        precision=precision,
        auc=auc(scores, true_labels),
        sum=sum_metric(counts),
        cost=cost_metric(counts),
        specificity=specificity(counts),
        counts=counts,
    )


def evaluate(bundle, test_set) -> MetricsReport:
    """Score a bundle's target-domain ensemble on a labeled test set."""
    from .datasets import stack_features
    from .inference import predict_target

    if len(test_set) == 0:
        raise MetricsError("empty test set")
    labels = [ex.label for ex in test_set]
    if any(lab is None for lab in labels):
        raise MetricsError("test set contains unlabeled examples")
    pred = predict_target(bundle, stack_features(test_set))
    return report_from_predictions(pred.hard_label, pred.positive_score, labels)


# Published reference rows: (method, F1, Recall, Precision, AUC, Sum, Cost),
# evaluated on 60 positives and 885 negatives.
REFERENCE_POSITIVES = 60
REFERENCE_NEGATIVES = 885
REFERENCE_ROWS: tuple[tuple[str, float, float, float, float, float, float], ...] = (
    ("Source-only", 65.04, 66.67, 63.49, 0.899, 82.03, 20.3),
    ("Target-only", 68.75, 55.00, 91.67, 0.971, 77.33, 24.6),
    ("Fine-tuning", 64.29, 75.00, 56.25, 0.946, 85.52, 17.0),
    ("DLAD", 67.18, 73.33, 61.97, 0.961, 85.14, 17.1),
    ("COVID-Net", 71.94, 83.33, 63.29, 0.977, 90.03, 11.9),
    ("MCD", 61.54, 60.00, 63.16, 0.904, 78.81, 23.7),
    ("DANN", 66.15, 71.67, 61.43, 0.904, 84.31, 18.0),
    ("DSN", 73.02, 76.67, 69.70, 0.884, 87.20, 14.6),
    ("DMAN", 75.63, 75.00, 76.27, 0.915, 86.71, 14.9),
    ("Semi-DMAN", 77.27, 85.00, 70.83, 0.978, 91.31, 10.2),
    ("SDT", 79.69, 85.00, 75.00, 0.962, 91.54, 9.8),
    ("COVID-DA", 92.98, 88.33, 98.15, 0.985, 94.11, 6.4),
)


def reconstruct_counts(
    recall: float,
    precision: float,
    positives: int = REFERENCE_POSITIVES,
    negatives: int = REFERENCE_NEGATIVES,
) -> list[ConfusionCounts]:
    """All integer confusion tables whose 2-decimal recall/precision match."""
    tol = 0.005 + 1e-9
    out = []
    for tp in range(positives + 1):
        if abs(100.0 * tp / positives - recall) > tol:
            continue
        for fp in range(negatives + 1):
            if tp + fp == 0:
                continue
            if abs(100.0 * tp / (tp + fp) - precision) <= tol:
                out.append(ConfusionCounts(tp=tp, fp=fp, tn=negatives - fp, fn=positives - tp))
    return out


@dataclass(frozen=True)
class RowCheck:
    method: str
    counts: ConfusionCounts | None
    sum_value: float
    cost_value: float
    sum_residual: float
    cost_residual: float
    passed: bool


def reconstruct_table_row(row: Sequence, tol: float = 0.05) -> RowCheck:
    method, _f1, recall, precision, _auc, sum_pub, cost_pub = row
    solutions = reconstruct_counts(recall, precision)
    if len(solutions) != 1:
        return RowCheck(method, None, float("nan"), float("nan"), float("inf"), float("inf"), False)
    counts = solutions[0]
    s = sum_metric(counts)
    c = cost_metric(counts)
    ds, dc = s - sum_pub, c - cost_pub
    return RowCheck(method, counts, s, c, ds, dc, abs(ds) <= tol and abs(dc) <= tol)


def verify_reference_rows(rows=REFERENCE_ROWS, tol: float = 0.05) -> list[RowCheck]:
    return [reconstruct_table_row(row, tol) for row in rows]
