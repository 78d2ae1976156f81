"""Dice loss, binarisation and confusion-matrix based change metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DICE_SMOOTH = 1.0


def _check_binary(arr: np.ndarray, what: str) -> None:
    if not np.all((arr == 0) | (arr == 1)):
        bad = np.unique(arr[(arr != 0) & (arr != 1)])[:5]
        raise ValueError(f"{what} must be binary (0/1), found values {bad.tolist()}")


def dice_loss(pred: Tensor, target, eps: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2 sum(y*p) + eps) / (sum(y) + sum(p) + eps)`` over every pixel in the batch."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} and target {tgt.shape} differ")
    _check_binary(tgt, "dice_loss target")
    y = Tensor(tgt)
    inter = T.tsum(T.mul(pred, y))
    denom = T.add(T.add(T.tsum(pred), float(tgt.sum())), eps)
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), eps), denom))


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold`` (inclusive), else 0, as uint8."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (p >= threshold).astype(np.uint8)


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = int(getattr(self, k))
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
            setattr(self, k, v)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    merge = __add__

    def to_dict(self) -> dict:
        return asdict(self)


def accumulate_cm(pred_mask, gt_mask, cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred mask {pred.shape} and ground truth {gt.shape} differ")
    _check_binary(pred, "pred_mask")
    _check_binary(gt, "gt_mask")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    new = ConfusionMatrix(tp, fp, tn, fn)
    return new if cm is None else cm + new


@dataclass
class MetricReport:
    """Percentages in [0, 100]."""

    f1: float
    precision: float
    recall: float
    oa: float
    iou: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v:.2f}" for k, v in self.to_dict().items())

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, sort_keys=True)


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0 else num / den


def f1_from_pr(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def iou_from_f1(f1: float) -> float:
    """IoU percentage implied by an F1 percentage (both from one TP/FP/FN triple)."""
    return 100.0 * f1 / (200.0 - f1)


def metrics_from_cm(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    precision = 100.0 * _ratio(tp, tp + fp)
    recall = 100.0 * _ratio(tp, tp + fn)
    return MetricReport(
        f1=f1_from_pr(precision, recall),
        precision=precision,
        recall=recall,
        oa=100.0 * (tp + tn) / cm.total,
        iou=100.0 * _ratio(tp, tp + fp + fn),
    )
