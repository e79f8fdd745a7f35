"""Confusion matrices, threshold scores, and rank-statistic AUC.

AUC is the probability that a random positive outranks a random negative,
ties counted one half (the Mann-Whitney formulation), computed from
tie-averaged ranks. Multi-class evaluation macro-averages one-vs-rest
binary scores; per-class AUC uses the class probability as the score and
skips classes missing a positive or negative example.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch, SingleClass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predicted: Sequence[bool], truth: Sequence[bool]) -> ConfusionMatrix:
    if len(predicted) != len(truth):
        raise ShapeMismatch(f"predicted length {len(predicted)} != truth {len(truth)}")
    tp = fp = tn = fn = 0
    for p, t in zip(predicted, truth):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def scores(cm: ConfusionMatrix) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); 0/0 cells yield 0 by convention."""

    def ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    accuracy = ratio(cm.tp + cm.tn, cm.total)
    precision = ratio(cm.tp, cm.tp + cm.fp)
    recall = ratio(cm.tp, cm.tp + cm.fn)
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return accuracy, precision, recall, f1


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receive the mean of their rank block."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(score_values: Sequence[float], labels: Sequence[bool]) -> float:
    if len(score_values) != len(labels):
        raise ShapeMismatch("scores and labels differ in length")
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(score_values, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative")
    ranks = _tie_averaged_ranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- multi-class extension (macro one-vs-rest) --------------------------------


def multiclass_scores(
    truth: Sequence[int], predicted: Sequence[int], n_classes: int
) -> dict[str, float]:
    if len(truth) != len(predicted):
        raise ShapeMismatch("truth and predicted differ in length")
    acc = prec = rec = f1 = 0.0
    for c in range(n_classes):
        cm = confusion([p == c for p in predicted], [t == c for t in truth])
        a, p, r, f = scores(cm)
        acc += a
        prec += p
        rec += r
        f1 += f
    return {
        "accuracy": acc / n_classes,
        "precision": prec / n_classes,
        "recall": rec / n_classes,
        "f1": f1 / n_classes,
    }


def multiclass_auc(truth: Sequence[int], class_probs: np.ndarray) -> float:
    """Macro one-vs-rest AUC over classes with both labels present."""
    truth_arr = np.asarray(truth)
    values = []
    for c in range(class_probs.shape[1]):
        labels = truth_arr == c
        if labels.all() or not labels.any():
            continue
        values.append(auc(class_probs[:, c], labels))
    if not values:
        raise SingleClass("no class has both positive and negative examples")
    return float(np.mean(values))


def metrics_report(
    truth: Sequence[int], predicted: Sequence[int], class_probs: np.ndarray, n_classes: int
) -> dict[str, float]:
    report = multiclass_scores(truth, predicted, n_classes)
    try:
        report["auc"] = multiclass_auc(truth, class_probs)
    except SingleClass:
        report["auc"] = float("nan")
    return report


def save_metrics_json(report: dict[str, float], path: Path | str) -> None:
    ordered = {k: report[k] for k in ("accuracy", "auc", "precision", "f1", "recall") if k in report}
    ordered.update({k: v for k, v in report.items() if k not in ordered})
    Path(path).write_text(json.dumps(ordered, indent=2), encoding="utf-8")
