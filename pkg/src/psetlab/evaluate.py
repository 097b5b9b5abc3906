"""Classification metrics and the comparative tables built from them."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    instance_accuracy: float
    mean_class_accuracy: float
    per_class_accuracy: np.ndarray
    class_counts: np.ndarray
    n_samples: int
    n_classes: int


def instance_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape or pred.ndim != 1:
        raise ValueError("predictions and labels must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(pred == labels) / pred.size)


def mean_class_accuracy(pred, labels, n_classes: int) -> tuple[float, np.ndarray]:
    """Unweighted mean of per-class recall, and the per-class vector.

    Every class must occur among ``labels``.
    """
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape or pred.size == 0:
        raise ValueError("predictions and labels must be equal-length, non-empty vectors")
    counts = np.bincount(labels, minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError("label out of range")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"mean class accuracy undefined: classes {missing.tolist()} have no samples")
    hits = np.bincount(labels[pred == labels], minlength=n_classes)
    per_class = hits / counts
    return float(per_class.mean()), per_class


def metrics(pred, labels, n_classes: int) -> MetricsReport:
    labels = np.asarray(labels)
    mca, per_class = mean_class_accuracy(pred, labels, n_classes)
    return MetricsReport(instance_accuracy(pred, labels), mca, per_class,
                         np.bincount(labels, minlength=n_classes), len(labels), n_classes)


def per_class_delta(single: MetricsReport, ensemble: MetricsReport) -> np.ndarray:
    """Ensemble minus single accuracy for every class (gain > 0, loss < 0)."""
    if single.n_classes != ensemble.n_classes:
        raise ValueError("reports cover different class counts")
    return ensemble.per_class_accuracy - single.per_class_accuracy


def best_per_class_rank(reports: Sequence[MetricsReport]) -> list[float]:
    """One point per class for the best architecture; an N-way tie splits it 1/N each."""
    if not reports:
        raise ValueError("no reports to rank")
    c = reports[0].n_classes
    if any(r.n_classes != c for r in reports):
        raise ValueError("reports cover different class counts")
    acc = np.stack([r.per_class_accuracy for r in reports])
    score = [Fraction(0)] * len(reports)
    for j in range(c):
        best = np.flatnonzero(acc[:, j] == acc[:, j].max())
        for i in best:
            score[i] += Fraction(1, len(best))
    return [float(s) for s in score]

