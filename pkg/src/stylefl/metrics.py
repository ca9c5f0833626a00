"""Classification metrics and the paired Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import DomainError, ShapeError

EXACT_MAX_N = 20


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    macro_f1: float
    brier: float
    confusion: np.ndarray
    n: int


def confusion_matrix(labels, predictions, class_count: int) -> np.ndarray:
    """Counts indexed ``[true, predicted]``."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ShapeError("labels and predictions differ in length")
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


def accuracy(confusion: np.ndarray) -> float:
    total = confusion.sum()
    if total == 0:
        raise DomainError("accuracy of an empty confusion matrix")
    return float(np.trace(confusion) / total)


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean per-class F1; a class with P + R == 0 scores 0."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.sum() < 1:
        raise DomainError("macro_f1 needs at least one sample")
    tp = np.diag(confusion)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def brier(probabilities, labels) -> float:
    """Mean over samples of the squared distance to the one-hot label (range [0, 2])."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.ndim != 2 or probabilities.shape[0] != labels.shape[0]:
        raise ShapeError(f"brier: probabilities {probabilities.shape} vs labels {labels.shape}")
    if probabilities.shape[0] == 0:
        raise DomainError("brier needs at least one sample")
    if np.any(np.abs(probabilities.sum(axis=1) - 1.0) > 1e-6):
        raise DomainError("brier: probability rows must sum to 1")
    onehot = np.zeros_like(probabilities)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return float(((probabilities - onehot) ** 2).sum(axis=1).mean())


def evaluate_probabilities(probabilities, labels, class_count: int) -> EvalResult:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    predictions = probabilities.argmax(axis=1)
    conf = confusion_matrix(labels, predictions, class_count)
    return EvalResult(
        accuracy=accuracy(conf),
        macro_f1=macro_f1(conf),
        brier=brier(probabilities, labels),
        confusion=conf,
        n=int(conf.sum()),
    )


def _exact_signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments reaching each doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided p-value of the paired signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes share average ranks.
    For at most 20 nonzero pairs the null distribution is computed exactly
    over all sign assignments; larger samples use the tie-corrected normal
    approximation with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("wilcoxon_signed_rank needs two equal-length 1-D samples")
    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        return 1.0
    if n < 5:
        raise DomainError(f"wilcoxon_signed_rank needs >= 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(diff))
    t_plus = float(ranks[diff > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_signed_rank_counts(doubled)
        probs = counts / counts.sum()
        t2 = int(round(2 * t_plus))
        lower = probs[: t2 + 1].sum()
        upper = probs[t2:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    dev = max(abs(t_plus - mean) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return float(min(1.0, 2.0 * ndtr(-z)))
