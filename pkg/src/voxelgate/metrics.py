"""Dice and Tversky overlap measures, hard (evaluation) and soft (training).

Hard metrics count voxels from integer label maps; the soft loss runs on
class probabilities so it stays differentiable. Both share the smoothing
term that defines empty-vs-empty overlap as perfect (1.0). Aggregation
over a dataset is per-case-then-average over the non-background classes;
globally pooled counts are reported alongside, labeled as such.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import EmptyDataset, InvalidConfig, LabelOutOfRange, ShapeMismatch
from .ops import _batched
from .tensor import Tensor

SMOOTH = 1e-6
FOREGROUND_CLASSES = (1, 2, 3)


@dataclass
class ConfusionCounts:
    tp: float
    fn: float
    fp: float


@dataclass(frozen=True)
class TverskyWeights:
    alpha: float = 0.7
    beta: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise InvalidConfig(f"bad Tversky weights alpha={self.alpha} beta={self.beta}")


def confusion_counts(pred: np.ndarray, truth: np.ndarray, cls: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} != truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() > 3):
            raise LabelOutOfRange(f"{name} labels outside 0..3")
    p = pred == cls
    t = truth == cls
    return ConfusionCounts(
        tp=float(np.count_nonzero(p & t)),
        fn=float(np.count_nonzero(~p & t)),
        fp=float(np.count_nonzero(p & ~t)),
    )


def dice(counts: ConfusionCounts, smooth: float = SMOOTH) -> float:
    return (2.0 * counts.tp + smooth) / (2.0 * counts.tp + counts.fn + counts.fp + smooth)


def tversky_index(counts: ConfusionCounts, w: TverskyWeights = TverskyWeights(),
                  smooth: float = SMOOTH) -> float:
    denom = counts.tp + w.alpha * counts.fn + w.beta * counts.fp + smooth
    return (counts.tp + smooth) / denom


def tversky_loss(counts: ConfusionCounts, w: TverskyWeights = TverskyWeights(),
                 smooth: float = SMOOTH) -> float:
    return 1.0 - tversky_index(counts, w, smooth)


def one_hot(labels: np.ndarray, n_classes: int = 4, dtype=np.float32) -> np.ndarray:
    """(L, W, S) int labels -> (n_classes, L, W, S) indicator volume."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels outside 0..{n_classes - 1}")
    out = np.zeros((n_classes,) + labels.shape, dtype=dtype)
    for c in range(n_classes):
        out[c] = labels == c
    return out


def soft_tversky_loss(probs: Tensor, truth_onehot: Tensor,
                      w: TverskyWeights = TverskyWeights(),
                      smooth: float = SMOOTH, class_reduce: str = "mean") -> Tensor:
    """Differentiable Tversky loss over the non-background classes.

    Soft counts per class c: tp = sum(p_c * t_c), fn = sum((1-p_c) * t_c),
    fp = sum(p_c * (1-t_c)); the loss is 1 - TI_c reduced over classes
    (mean by default, sum optionally) and averaged over the batch.
    """
    if probs.shape != truth_onehot.shape:
        raise ShapeMismatch(f"probs {probs.shape} != truth {truth_onehot.shape}")
    if class_reduce not in ("mean", "sum"):
        raise InvalidConfig(f"class_reduce must be mean|sum, got {class_reduce!r}")
    p5, _ = _batched(probs)
    t5, _ = _batched(truth_onehot)
    spatial = (2, 3, 4)
    tp = (p5 * t5).sum(axis=spatial)
    fn = ((1.0 - p5) * t5).sum(axis=spatial)
    fp = (p5 * (1.0 - t5)).sum(axis=spatial)
    ti = (tp + smooth) / (tp + w.alpha * fn + w.beta * fp + smooth)
    per_class = (1.0 - ti)[:, 1:]
    if class_reduce == "mean":
        return per_class.mean()
    return per_class.sum(axis=1).mean()


@dataclass
class MetricsReport:
    per_class: dict                 # class -> (mean dice, mean tversky index)
    mean_dice: float
    mean_tversky_loss: float
    n_cases: int
    aggregation: str = "per-case-average"
    pooled_per_class: dict = field(default_factory=dict)
    pooled_mean_dice: float = 0.0
    pooled_mean_tversky_loss: float = 0.0
    per_case: list = field(default_factory=list)   # (case_id, {cls: (dice, ti)})


def evaluate_split(model, cases, w: TverskyWeights = TverskyWeights(),
                   smooth: float = SMOOTH) -> MetricsReport:
    """Evaluate hard predictions over labeled cases.

    ``model`` is either a callable mapping a StackedCase to an integer
    label volume, or ModelParams (argmax of the network output is used).
    Per-case dice/Tversky per class are averaged over cases and over the
    non-background classes; pooled counts are reported alongside.
    """
    cases = list(cases)
    if not cases:
        raise EmptyDataset("no cases to evaluate")
    if callable(model):
        predict = model
    else:
        from .model import predict_labels
        params = model

        def predict(case):
            return predict_labels(params, case)

    pooled = {c: ConfusionCounts(0.0, 0.0, 0.0) for c in FOREGROUND_CLASSES}
    per_case = []
    dice_sums = {c: 0.0 for c in FOREGROUND_CLASSES}
    ti_sums = {c: 0.0 for c in FOREGROUND_CLASSES}
    for case in cases:
        if case.labels is None:
            raise EmptyDataset(f"case {case.case_id} has no labels")
        pred = np.asarray(predict(case))
        row = {}
        for c in FOREGROUND_CLASSES:
            counts = confusion_counts(pred, case.labels, c)
            d = dice(counts, smooth)
            ti = tversky_index(counts, w, smooth)
            row[c] = (d, ti)
            dice_sums[c] += d
            ti_sums[c] += ti
            pooled[c].tp += counts.tp
            pooled[c].fn += counts.fn
            pooled[c].fp += counts.fp
        per_case.append((case.case_id, row))

    n = len(cases)
    per_class = {c: (dice_sums[c] / n, ti_sums[c] / n) for c in FOREGROUND_CLASSES}
    mean_dice = float(np.mean([per_class[c][0] for c in FOREGROUND_CLASSES]))
    mean_tl = float(np.mean([1.0 - per_class[c][1] for c in FOREGROUND_CLASSES]))
    pooled_per_class = {
        c: (dice(pooled[c], smooth), tversky_index(pooled[c], w, smooth))
        for c in FOREGROUND_CLASSES}
    return MetricsReport(
        per_class=per_class,
        mean_dice=mean_dice,
        mean_tversky_loss=mean_tl,
        n_cases=n,
        pooled_per_class=pooled_per_class,
        pooled_mean_dice=float(np.mean([pooled_per_class[c][0] for c in FOREGROUND_CLASSES])),
        pooled_mean_tversky_loss=float(np.mean(
            [1.0 - pooled_per_class[c][1] for c in FOREGROUND_CLASSES])),
        per_case=per_case,
    )


CLASS_NAMES = {1: "necrosis", 2: "edema", 3: "enhancing"}


def report_text(report: MetricsReport, label: str = "") -> str:
    lines = [
        f"cases = {report.n_cases}",
        f"aggregation = {report.aggregation}",
        f"mean_dice = {report.mean_dice:.6f}",
        f"mean_tversky_loss = {report.mean_tversky_loss:.6f}",
        f"pooled_mean_dice = {report.pooled_mean_dice:.6f}",
        f"pooled_mean_tversky_loss = {report.pooled_mean_tversky_loss:.6f}",
        "",
        "class | dice | tversky_index",
    ]
    for c in FOREGROUND_CLASSES:
        d, ti = report.per_class[c]
        lines.append(f"{c} ({CLASS_NAMES[c]}) | {d:.6f} | {ti:.6f}")
    lines += [
        "",
        "Trial | Dice Coefficient | Tversky Loss",
        f"{label or 'run'} | {report.mean_dice:.4f} | {report.mean_tversky_loss:.4f}",
    ]
    return "\n".join(lines) + "\n"


def report_csv(report: MetricsReport) -> str:
    """One flat CSV row per case."""
    header = ["case_id"]
    for c in FOREGROUND_CLASSES:
        header += [f"dice_{c}", f"tversky_{c}"]
    rows = [",".join(header)]
    for case_id, row in report.per_case:
        cells = [case_id]
        for c in FOREGROUND_CLASSES:
            d, ti = row[c]
            cells += [f"{d:.6f}", f"{ti:.6f}"]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
