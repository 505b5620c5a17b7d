"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError


class ConfusionMatrix:
    """Pixel tally with rows = truth and columns = prediction."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("n_classes must be positive")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.ignored = 0

    @property
    def scored(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth, ignore_index: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ", axis="shape")
        keep = truth != ignore_index
        k = self.n_classes
        for name, arr in (("truth", truth[keep]), ("prediction", pred[keep])):
            bad = (arr < 0) | (arr >= k)
            if bad.any():
                raise DataError(f"{name} class {int(arr[bad][0])} outside [0, {k})")
        idx = truth[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        self.ignored += int((~keep).sum())
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DimensionError("cannot merge matrices of different class counts", axis="classes")
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    __add__ = merge


@dataclass
class SegMetrics:
    """mIoU, pixel accuracy and mean class accuracy.

    Unpacks as ``miou, pixacc, macc``. When no pixel was scored all three are
    NaN and ``undefined`` is set.
    """

    miou: float
    pixacc: float
    macc: float
    iou: np.ndarray = field(repr=False, default=None)
    undefined: bool = False

    def __iter__(self):
        return iter((self.miou, self.pixacc, self.macc))


def metrics(cm: ConfusionMatrix | np.ndarray) -> SegMetrics:
    """IoU_c = TP/(TP+FP+FN) averaged over classes present in truth or
    prediction; PixAcc = trace/total; mAcc = mean over classes present in
    truth of TP/row-sum."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = counts.sum()
    if total == 0:
        nan = float("nan")
        return SegMetrics(nan, nan, nan, np.full(counts.shape[0], np.nan), True)
    tp = np.diag(counts).astype(np.float64)
    support = counts.sum(axis=1).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    union = support + predicted - tp
    iou = np.full(len(tp), np.nan)
    np.divide(tp, union, out=iou, where=union > 0)
    present = support > 0
    return SegMetrics(
        miou=float(iou[union > 0].mean()),
        pixacc=float(tp.sum() / total),
        macc=float((tp[present] / support[present]).mean()),
        iou=iou,
    )
