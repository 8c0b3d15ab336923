"""Confusion-matrix evaluation: overall accuracy, average (per-class recall)
accuracy, Cohen's kappa, and mean/std aggregation over repeated runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Rows index the true class, columns the prediction (both 0-based)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def classes(self) -> int:
        return self.counts.shape[0]


def accumulate(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None, n_classes: int) -> ConfusionMatrix:
    """Count (truth, prediction) pairs over masked, labeled pixels only."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    selected = truth > 0
    if mask is not None:
        if np.asarray(mask).shape != truth.shape:
            raise ValueError("mask shape does not match the label map")
        selected = selected & np.asarray(mask, dtype=bool)
    t = truth[selected].astype(int) - 1
    p = pred[selected].astype(int) - 1
    if t.size and (t.max() >= n_classes or p.max() >= n_classes or p.min() < 0):
        raise ValueError("class index outside the confusion matrix")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def oa(cm: ConfusionMatrix) -> float:
    """Overall accuracy: correct pixels over evaluated pixels."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def aa(cm: ConfusionMatrix) -> float:
    """Average accuracy: per-class recall averaged over supported classes."""
    rowsums = cm.counts.sum(axis=1)
    supported = rowsums > 0
    if not supported.any():
        raise ValueError("no class has any evaluated pixel")
    if not supported.all():
        excluded = np.nonzero(~supported)[0] + 1
        logger.warning("excluding zero-support classes %s from average accuracy", excluded.tolist())
    recalls = np.diag(cm.counts)[supported] / rowsums[supported]
    return float(recalls.mean())


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's chance-corrected agreement (p_o - p_e) / (1 - p_e)."""
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = oa(cm)
    rowsums = cm.counts.sum(axis=1).astype(np.float64)
    colsums = cm.counts.sum(axis=0).astype(np.float64)
    p_e = float((rowsums * colsums).sum()) / (total * total)
    if p_e >= 1.0:
        raise ValueError("degenerate marginals: expected agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


def evaluate(pred, truth, mask, n_classes: int) -> tuple[ConfusionMatrix, float, float, float]:
    cm = accumulate(pred, truth, mask, n_classes)
    return cm, oa(cm), aa(cm), kappa(cm)


def aggregate_runs(runs: list[tuple[float, float, float]]) -> dict[str, tuple[float, float]]:
    """Sample mean and population std of (oa, aa, kappa) triples."""
    if len(runs) == 0:
        raise ValueError("no runs to aggregate")
    arr = np.asarray(runs, dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    return {
        "oa": (float(mean[0]), float(std[0])),
        "aa": (float(mean[1]), float(std[1])),
        "kappa": (float(mean[2]), float(std[2])),
    }


def format_mean_std(mean: float, std: float) -> str:
    """Percent with two decimals, the reporting convention of this artifact."""
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"


def write_report(path, cm: ConfusionMatrix, stats: dict[str, tuple[float, float]]) -> None:
    """One metric per line as '<NAME> <mean> <std>', then the confusion matrix
    as CSV rows."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in ("oa", "aa", "kappa"):
            mean, std = stats[key]
            fh.write(f"{key.upper()} {mean:.6f} {std:.6f}\n")
        fh.write("\n")
        for row in cm.counts:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def ablation_report(rows: list[tuple[str, float, float, float]]) -> str:
    """Aligned text table of (method, oa, aa, kappa) rows, in percent."""
    header = f"{'Method':<8} {'OA(%)':>8} {'AA(%)':>8} {'Kappa(%)':>9}"
    lines = [header, "-" * len(header)]
    for name, o, a, k in rows:
        lines.append(f"{name:<8} {100 * o:>8.2f} {100 * a:>8.2f} {100 * k:>9.2f}")
    return "\n".join(lines) + "\n"
