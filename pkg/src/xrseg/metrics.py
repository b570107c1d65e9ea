"""Pixel confusion counts, overlap scores, losses and cumulative curves."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .tensor_core import ShapeError, Tensor, record_op

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7
DEFAULT_THRESHOLD = 0.5


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} != truth shape {b.shape}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred_prob, truth, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    p, t = _arr(pred_prob), _arr(truth)
    _same_shape(p, t)
    pos = p >= threshold
    actual = t > 0.5
    tp = int(np.count_nonzero(pos & actual))
    fp = int(np.count_nonzero(pos & ~actual))
    fn = int(np.count_nonzero(~pos & actual))
    return ConfusionCounts(tp=tp, tn=int(p.size) - tp - fp - fn, fp=fp, fn=fn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


@dataclass(frozen=True)
class DerivedMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    sensitivity: float
    degenerate: bool = False


def derive_metrics(c: ConfusionCounts) -> DerivedMetrics:
    """Accuracy, precision, recall, F1 and specificity; every 0/0 becomes 0 and sets ``degenerate``."""
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    accuracy = (c.tp + c.tn) / c.total
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    specificity, d3 = _ratio(c.tn, c.tn + c.fp)
    f1, d4 = _ratio(2 * precision * recall, precision + recall)
    return DerivedMetrics(accuracy, precision, recall, f1, specificity, recall, d1 or d2 or d3 or d4)


def dice_coef(pred_prob, truth, epsilon: float = DICE_EPS) -> float:
    """Soft Dice (2·Σpt + ε) / (Σp + Σt + ε); empty-vs-empty scores 1."""
    p, t = _arr(pred_prob).astype(np.float64), _arr(truth).astype(np.float64)
    _same_shape(p, t)
    inter, total = float((p * t).sum()), float(p.sum() + t.sum())
    if total + epsilon == 0:
        return 1.0
    return (2 * inter + epsilon) / (total + epsilon)


def jaccard_coef(pred_prob, truth, epsilon: float = DICE_EPS) -> float:
    """Soft IoU (Σpt + ε) / (Σp + Σt − Σpt + ε); empty-vs-empty scores 1."""
    p, t = _arr(pred_prob).astype(np.float64), _arr(truth).astype(np.float64)
    _same_shape(p, t)
    inter = float((p * t).sum())
    union = float(p.sum() + t.sum()) - inter
    if union + epsilon == 0:
        return 1.0
    return (inter + epsilon) / (union + epsilon)


def _per_sample_axes(x: np.ndarray) -> tuple[int, ...]:
    return tuple(range(1, x.ndim)) if x.ndim == 4 else tuple(range(x.ndim))


def per_image_dice(pred_prob, truth, epsilon: float = DICE_EPS) -> np.ndarray:
    p, t = _arr(pred_prob).astype(np.float64), _arr(truth).astype(np.float64)
    _same_shape(p, t)
    axes = _per_sample_axes(p)
    return (2 * (p * t).sum(axis=axes) + epsilon) / (p.sum(axis=axes) + t.sum(axis=axes) + epsilon)


def dice_loss(pred_prob: Tensor, truth, epsilon: float = DICE_EPS) -> Tensor:
    """1 − soft Dice, averaged over images for B×C×H×W input.

    Sums are accumulated in float64 so the logged loss is exactly the
    complement of the logged Dice.
    """
    p = pred_prob.data
    t = _arr(truth).astype(np.float64)
    _same_shape(p, t)
    axes = _per_sample_axes(p)
    p64 = p.astype(np.float64)
    inter = (p64 * t).sum(axis=axes, keepdims=True)
    denom = p64.sum(axis=axes, keepdims=True) + t.sum(axis=axes, keepdims=True) + epsilon
    dice = (2 * inter + epsilon) / denom
    n = dice.size
    loss = 1.0 - dice.mean()

    def backward_fn(g):
        # d dice / dp = (2t·denom − (2·inter + ε)) / denom²
        grad = -(2 * t * denom - (2 * inter + epsilon)) / denom**2 / n
        return ((g * grad).astype(p.dtype),)

    return record_op("dice_loss", (pred_prob,), np.asarray(loss, dtype=p.dtype), backward_fn)


def bce_loss(pred_prob: Tensor, truth) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7]."""
    p = pred_prob.data
    t = _arr(truth).astype(np.float64)
    _same_shape(p, t)
    pc = np.clip(p.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (p > BCE_CLAMP) & (p < 1 - BCE_CLAMP)
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    n = p.size

    def backward_fn(g):
        grad = np.where(inside, (pc - t) / (pc * (1 - pc)), 0.0) / n
        return ((g * grad).astype(p.dtype),)

    return record_op("bce_loss", (pred_prob,), np.asarray(loss, dtype=p.dtype), backward_fn)


LOSSES = {"dice": dice_loss, "bce": bce_loss}


# -- reports ------------------------------------------------------------------

REPORT_FIELDS = ("loss", "dice_coef", "jaccard_coef", "binary_accuracy", "precision", "recall")


@dataclass
class MetricsReport:
    loss: float
    dice_coef: float
    jaccard_coef: float
    binary_accuracy: float
    precision: float
    recall: float
    specificity: float | None = None
    sensitivity: float | None = None
    f1: float | None = None
    degenerate: bool = False

    def row(self, prefix: str = "") -> dict[str, float]:
        return {prefix + k: getattr(self, k) for k in REPORT_FIELDS}

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageScores:
    dice: float
    jaccard: float
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    degenerate: bool


def score_image(pred_prob: np.ndarray, truth: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> ImageScores:
    d = derive_metrics(confusion(pred_prob, truth, threshold))
    return ImageScores(
        dice=dice_coef(pred_prob, truth),
        jaccard=jaccard_coef(pred_prob, truth),
        accuracy=d.accuracy,
        precision=d.precision,
        recall=d.recall,
        specificity=d.specificity,
        f1=d.f1,
        degenerate=d.degenerate,
    )


def score_batch(pred_prob, truth, threshold: float = DEFAULT_THRESHOLD) -> list[ImageScores]:
    p, t = _arr(pred_prob), _arr(truth)
    _same_shape(p, t)
    return [score_image(p[i], t[i], threshold) for i in range(p.shape[0])]


def summarize(scores: Sequence[ImageScores], loss: float) -> MetricsReport:
    """Mean of per-image scores, with the supplied loss."""
    if not scores:
        raise ValueError("no scores to summarize")
    mean = lambda attr: float(np.mean([getattr(s, attr) for s in scores]))  # noqa: E731
    return MetricsReport(
        loss=loss,
        dice_coef=mean("dice"),
        jaccard_coef=mean("jaccard"),
        binary_accuracy=mean("accuracy"),
        precision=mean("precision"),
        recall=mean("recall"),
        specificity=mean("specificity"),
        sensitivity=mean("recall"),
        f1=mean("f1"),
        degenerate=any(s.degenerate for s in scores),
    )


# -- cumulative frequency curves ---------------------------------------------


@dataclass(frozen=True)
class Curve:
    thresholds: np.ndarray
    fractions: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.fractions.tolist()))

    def at(self, threshold: float) -> float:
        i = int(np.argmin(np.abs(self.thresholds - threshold)))
        return float(self.fractions[i])


def cumulative_curve(values: Sequence[float], n_points: int = 100) -> Curve:
    """Empirical CDF sampled at thresholds i/n_points, i = 1..n_points."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    if vals.size == 0:
        raise ValueError("cumulative_curve needs at least one value")
    if vals[0] < 0.0 or vals[-1] > 1.0:
        raise ValueError("cumulative_curve values must lie in [0, 1]")
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    thresholds = np.arange(1, n_points + 1) / n_points
    counts = np.searchsorted(vals, thresholds, side="right")
    fractions = counts / vals.size
    return Curve(thresholds, fractions)
