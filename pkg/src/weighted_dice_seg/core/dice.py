"""
Dice overlap: the hard coefficient, the soft Dice loss and its gradient, class-frequency
weights and per-class reports.

Reductions are accumulated in float64 regardless of the input dtype.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
import polars as pl

from weighted_dice_seg.configuration.config import DICE_DENOMINATOR_EPSILON, WEIGHT_EPSILON
from weighted_dice_seg.core.voxelgrid import LabelVolume
from weighted_dice_seg.utilities.helper_functions import format_percentage

logger = logging.getLogger(__name__)

DIVERGED = "diverged"
AGGREGATE_ROWS = ("AVG", "MAX", "MIN")


class DiceInputError(ValueError):
    """Dice inputs are inconsistent or not finite."""


class WeightingScheme(str, Enum):
    """Class balancing schemes for the multi-class Dice loss."""

    UNIFORM = "uniform"
    SIMPLE = "simple"
    SQUARE = "square"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ClassCounts:
    """Voxels per class over a collection of label volumes."""

    per_class: np.ndarray
    total: int

    def __post_init__(self):
        per_class = np.asarray(self.per_class, dtype=np.int64)
        if per_class.ndim != 1 or per_class.size < 2:
            raise ValueError(f"Class counts need at least 2 classes, got {per_class.shape}.")
        if (per_class < 0).any():
            raise ValueError("Class counts must be non-negative.")
        if int(per_class.sum()) != int(self.total):
            raise ValueError(f"Counts sum to {per_class.sum()}, total says {self.total}.")
        object.__setattr__(self, "per_class", per_class)
        object.__setattr__(self, "total", int(self.total))

    @property
    def num_classes(self) -> int:
        """Number of classes L."""
        return self.per_class.size


@dataclass(frozen=True)
class ClassWeights:
    """Per-class weights w_l of one scheme."""

    scheme: WeightingScheme
    w: np.ndarray
    epsilon: float = WEIGHT_EPSILON

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not np.all(w > 0):
            raise ValueError("Class weights must be positive and finite.")
        if self.scheme == WeightingScheme.UNIFORM and not np.all(w == 1.0):
            raise ValueError("Uniform weights must all equal 1.")
        object.__setattr__(self, "scheme", WeightingScheme(self.scheme))
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        """All-ones weights."""
        return cls(WeightingScheme.UNIFORM, np.ones(num_classes))

    def as_dict(self, class_names: Sequence[str] | None = None) -> dict:
        """JSON-ready mapping of the scheme, epsilon and per-class weights."""
        names = class_names or [f"class_{label}" for label in range(self.w.size)]
        return {
            "scheme": str(self.scheme),
            "epsilon": self.epsilon,
            "weights": {name: float(weight) for name, weight in zip(names, self.w)},
        }


def _check_pair(seg: LabelVolume, truth: LabelVolume):
    if seg.shape != truth.shape:
        raise DiceInputError(f"Shape mismatch: {tuple(seg.shape)} vs {tuple(truth.shape)}.")
    if seg.num_classes != truth.num_classes:
        raise DiceInputError(
            f"Class count mismatch: {seg.num_classes} vs {truth.num_classes}."
        )


def hard_dsc(seg: LabelVolume, truth: LabelVolume, class_id: int) -> float:
    """Dice coefficient 2|S n R| / (|S| + |R|) for one class.

    A class absent from both volumes scores 1.0.

    Raises:
        DiceInputError: On shape or class-count mismatch, or a class id out of range.
    """
    _check_pair(seg, truth)
    if not 0 <= class_id < truth.num_classes:
        raise DiceInputError(f"class_id {class_id} outside [0, {truth.num_classes}).")
    seg_mask = seg.labels == class_id
    truth_mask = truth.labels == class_id
    denominator = int(seg_mask.sum()) + int(truth_mask.sum())
    if denominator == 0:
        return 1.0
    return 2.0 * int(np.logical_and(seg_mask, truth_mask).sum()) / denominator


def _soft_terms(s: np.ndarray, r: np.ndarray, eps: float):
    s = np.asarray(s)
    r = np.asarray(r)
    if s.shape != r.shape or s.size == 0:
        raise DiceInputError(f"Soft Dice needs equal non-empty shapes, got {s.shape}, {r.shape}.")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(r))):
        raise DiceInputError("Soft Dice inputs must be finite.")
    intersection = float(np.sum(s * r, dtype=np.float64))
    denominator = float(np.sum(s, dtype=np.float64) + np.sum(r, dtype=np.float64))
    return intersection, max(denominator, eps)


def soft_dice_loss(s: np.ndarray, r: np.ndarray, eps: float = DICE_DENOMINATOR_EPSILON) -> float:
    """Soft Dice loss -2 sum(s r) / (sum(s) + sum(r)), in [-1, 0].

    The denominator is floored at `eps`, so an empty class with an empty prediction gives 0.
    """
    intersection, denominator = _soft_terms(s, r, eps)
    return -2.0 * intersection / denominator


def soft_dice_grad(s: np.ndarray, r: np.ndarray, eps: float = DICE_DENOMINATOR_EPSILON):
    """Gradient of `soft_dice_loss` with respect to s: -2 (r_j B - A) / B^2."""
    intersection, denominator = _soft_terms(s, r, eps)
    r = np.asarray(r, dtype=np.float64)
    return -2.0 * (r * denominator - intersection) / denominator**2


def class_counts(labels: Iterable[LabelVolume], num_classes: int | None = None) -> ClassCounts:
    """Count voxels per class over a collection of label volumes.

    Args:
        labels: The label volumes, all with the same class count.
        num_classes: Required for an empty collection; otherwise checked against the volumes.

    Raises:
        ValueError: On class-count mismatch, or an empty collection without `num_classes`.
    """
    per_class = None
    for volume in labels:
        if num_classes is None:
            num_classes = volume.num_classes
        if volume.num_classes != num_classes:
            raise ValueError(
                f"Label volume has {volume.num_classes} classes, expected {num_classes}."
            )
        counts = np.bincount(volume.labels.ravel(), minlength=num_classes).astype(np.int64)
        per_class = counts if per_class is None else per_class + counts
    if num_classes is None:
        raise ValueError("num_classes is required to count an empty collection.")
    if per_class is None:
        per_class = np.zeros(num_classes, dtype=np.int64)
    return ClassCounts(per_class, int(per_class.sum()))


def class_weights(
    counts: ClassCounts, scheme: WeightingScheme | str, epsilon: float = WEIGHT_EPSILON
) -> ClassWeights:
    """Class balancing weights with N the total voxel count and L the class count.

    uniform: 1; simple: N / (L |R_l| + eps); square: N / (L |R_l|^2 + eps).

    Raises:
        ValueError: If no voxels were counted, since the weights would all vanish.
    """
    scheme = WeightingScheme(scheme)
    num_classes = counts.num_classes
    if scheme == WeightingScheme.UNIFORM:
        return ClassWeights.uniform(num_classes)
    if counts.total == 0:
        raise ValueError(f"Cannot derive {scheme} weights from zero counted voxels.")
    frequencies = counts.per_class.astype(np.float64)
    if scheme == WeightingScheme.SQUARE:
        frequencies = frequencies**2
    weights = counts.total / (num_classes * frequencies + epsilon)
    logger.debug("%s weights: %s", scheme, weights)
    return ClassWeights(scheme, weights, epsilon)


@dataclass(frozen=True)
class MulticlassDiceResult:
    """Loss value, its gradient with respect to the prediction, and per-class Dice losses."""

    loss: float
    gradient: np.ndarray
    per_class: np.ndarray


def multiclass_dice_loss(
    pred: np.ndarray, target: np.ndarray, weights: ClassWeights
) -> MulticlassDiceResult:
    """Weighted multi-class Dice loss (1/L) sum_l w_l L_DSC(channel l).

    Each channel's soft Dice is pooled over the whole batch.

    Args:
        pred: Softmax output (batch, L, x, y, z).
        target: One-hot target of the same shape.
        weights: One weight per class.
    """
    if pred.shape != target.shape or pred.ndim != 5:
        raise DiceInputError(f"Prediction {pred.shape} and target {target.shape} differ.")
    num_classes = pred.shape[1]
    if weights.w.size != num_classes:
        raise DiceInputError(f"{weights.w.size} weights for {num_classes} classes.")
    gradient = np.empty(pred.shape, dtype=np.float64)
    per_class = np.empty(num_classes, dtype=np.float64)
    for label in range(num_classes):
        s, r = pred[:, label], target[:, label]
        per_class[label] = soft_dice_loss(s, r)
        gradient[:, label] = weights.w[label] / num_classes * soft_dice_grad(s, r)
    loss = float(np.dot(weights.w, per_class) / num_classes)
    return MulticlassDiceResult(loss, gradient.astype(pred.dtype, copy=False), per_class)


@dataclass(frozen=True)
class DiceReport:
    """Per-class Dice coefficients and their AVG/MAX/MIN over all classes."""

    class_names: tuple[str, ...]
    per_class: np.ndarray
    avg: float
    max: float
    min: float

    @classmethod
    def from_scores(cls, class_names: Sequence[str], scores: Sequence[float]) -> "DiceReport":
        """Build a report from per-class scores in [0, 1]."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size != len(class_names) or scores.size == 0:
            raise ValueError(f"{scores.size} scores for {len(class_names)} class names.")
        if np.any(scores < 0.0) or np.any(scores > 1.0):
            raise ValueError("Dice scores must lie in [0, 1].")
        return cls(
            tuple(class_names),
            scores,
            float(scores.mean()),
            float(scores.max()),
            float(scores.min()),
        )

    def rows(self) -> list[tuple[str, float]]:
        """(row label, value) pairs: classes then AVG, MAX, MIN."""
        return list(zip(self.class_names, self.per_class.tolist())) + list(
            zip(AGGREGATE_ROWS, (self.avg, self.max, self.min))
        )

    def percentages(self) -> list[str]:
        """Row values as one-decimal percentage strings."""
        return [format_percentage(value) for _, value in self.rows()]


def dice_report(pred: LabelVolume, truth: LabelVolume, class_names: Sequence[str]) -> DiceReport:
    """Hard Dice for every class (background included) and their aggregates."""
    if len(class_names) != truth.num_classes:
        raise DiceInputError(f"{len(class_names)} names for {truth.num_classes} classes.")
    scores = [hard_dsc(pred, truth, label) for label in range(truth.num_classes)]
    return DiceReport.from_scores(class_names, scores)


def mean_dice_report(reports: Sequence[DiceReport]) -> DiceReport:
    """Average several reports class by class, then aggregate."""
    if not reports:
        raise ValueError("At least one report is required.")
    names = reports[0].class_names
    if any(report.class_names != names for report in reports):
        raise ValueError("Reports cover different classes.")
    return DiceReport.from_scores(names, np.mean([report.per_class for report in reports], axis=0))


def report_table(
    reports: Mapping[str, DiceReport | None], class_names: Sequence[str] | None = None
) -> pl.DataFrame:
    """Table-1 shaped frame: one row per class plus AVG/MAX/MIN, one column per run.

    A run mapped to None is rendered as "diverged" in every row.

    Args:
        reports: run label to report, None for a diverged run
        class_names: row names; taken from the first completed run when omitted

    Raises:
        ValueError: when no row names are given and no run completed
    """
    if class_names is None:
        completed = [report for report in reports.values() if report is not None]
        if not completed:
            raise ValueError("Class names are needed when no run completed.")
        class_names = completed[0].class_names
    names = tuple(class_names)
    row_labels = list(names) + list(AGGREGATE_ROWS)
    columns = {"class": row_labels}
    for label, report in reports.items():
        if report is None:
            columns[label] = [DIVERGED] * len(row_labels)
        else:
            if report.class_names != names:
                raise ValueError(f"Run {label} covers different classes.")
            columns[label] = report.percentages()
    return pl.DataFrame(columns, schema={name: pl.String for name in columns})


def best_runs(reports: Mapping[str, DiceReport | None]) -> pl.DataFrame:
    """For each class and aggregate row, the run with the highest score (first on ties)."""
    completed = {label: report for label, report in reports.items() if report is not None}
    if not completed:
        raise ValueError("At least one completed run is needed.")
    labels = list(completed)
    table = np.array([[value for _, value in report.rows()] for report in completed.values()])
    winners = table.argmax(axis=0)
    row_labels = [row for row, _ in next(iter(completed.values())).rows()]
    return pl.DataFrame(
        {
            "class": row_labels,
            "best_run": [labels[index] for index in winners],
            "dsc": [format_percentage(table[index, row]) for row, index in enumerate(winners)],
        }
    )
