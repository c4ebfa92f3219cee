"""Confusion matrix, per-class IoU, mIoU and comparison-table reports."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelError, ShapeError, UndefinedClassError
from .taxonomy import IGNORE_ID


class ConfusionMatrix:
    """``counts[g, p]`` = pixels with ground truth g predicted as p.

    Pixels whose ground truth is 255 are skipped. Pixels predicted 255 with
    valid ground truth go to ``rejected[g]`` and count as false negatives.
    """

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.uint64)
        self.rejected = np.zeros(n_classes, dtype=np.uint64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + int(self.rejected.sum())

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ShapeError(f"gt shape {gt.shape} != prediction shape {pred.shape}")
        c = self.n_classes
        for name, arr in (("ground truth", gt), ("prediction", pred)):
            bad = (arr >= c) & (arr != IGNORE_ID)
            if bad.any():
                coord = tuple(int(i) for i in np.argwhere(bad)[0])
                raise LabelError(f"{name} label {int(arr[coord])} at pixel {coord} out of range for {c} classes")
        valid = gt != IGNORE_ID
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        hit = p != IGNORE_ID
        self.counts += np.bincount(g[hit] * c + p[hit], minlength=c * c).reshape(c, c).astype(np.uint64)
        self.rejected += np.bincount(g[~hit], minlength=c).astype(np.uint64)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ShapeError("confusion matrices have different class counts")
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        out.rejected = self.rejected + other.rejected
        return out

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.n_classes == other.n_classes
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.rejected, other.rejected)
        )


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(gt, pred)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the class has no support and no predictions."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp + cm.rejected.astype(np.float64)
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix, evaluated_classes: Iterable[int]) -> float:
    classes = list(evaluated_classes)
    if not classes:
        raise ValueError("evaluated_classes is empty")
    ious = iou_per_class(cm)
    undefined = [c for c in classes if math.isnan(ious[c])]
    if undefined:
        raise UndefinedClassError(f"IoU undefined for classes {undefined} (no support, no predictions)")
    return float(sum(ious[c] for c in sorted(classes)) / len(classes))


def summarize(cm: ConfusionMatrix, evaluated_classes: Sequence[int]) -> tuple[list[float], float]:
    """IoUs of the evaluated classes and their mean over the defined ones (NaN if none is defined).

    Unlike :func:`miou` this never raises, which suits reports where a
    class may be absent from a small test split.
    """
    ious = iou_per_class(cm)
    chosen = [float(ious[c]) for c in evaluated_classes]
    defined = [v for v in chosen if not math.isnan(v)]
    return chosen, (sum(defined) / len(defined) if defined else float("nan"))


def format_report(
    rows: Sequence[tuple[str, Sequence[float], float]],
    class_names: Sequence[str],
    title: str = "Source",
) -> str:
    """Fixed-width table of IoU percentages; the best mIoU row is marked with ``*``.

    IoU and mIoU values are fractions in [0, 1] and printed as percentages
    with two decimals.
    """
    for label, ious, _ in rows:
        if len(ious) != len(class_names):
            raise ShapeError(f"row {label!r} has {len(ious)} IoUs for {len(class_names)} classes")
    label_w = max([len(title)] + [len(r[0]) for r in rows])
    col_w = [max(len(n), 6) for n in class_names]
    header = "  ".join([title.ljust(label_w)] + [n.rjust(w) for n, w in zip(class_names, col_w)] + ["mIoU".rjust(6)])
    lines = [header, "-" * len(header)]
    best = None
    if rows:
        scores = [r[2] if not math.isnan(r[2]) else -math.inf for r in rows]
        best = scores.index(max(scores))
    for i, (label, ious, m) in enumerate(rows):
        cells = [label.ljust(label_w)] + [_pct(v).rjust(w) for v, w in zip(ious, col_w)] + [_pct(m).rjust(6)]
        line = "  ".join(cells)
        lines.append(line + (" *" if i == best else ""))
    return "\n".join(lines) + "\n"


def format_machine_report(rows: Sequence[tuple[str, Sequence[float], float]]) -> str:
    """One tab-separated line per row: label, space-separated IoUs, mIoU (6 decimals)."""
    out = []
    for label, ious, m in rows:
        out.append(f"{label}\t{' '.join(_fixed(v) for v in ious)}\t{_fixed(m)}")
    return "\n".join(out) + ("\n" if out else "")


def _pct(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{100.0 * v:.2f}"


def _fixed(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"
