"""Pixel confusion counts and the precision / recall / F1 / IoU / mIoU report."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ContractError


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) pixel counts with class 1 = power line."""
    pred = pred.cpu().numpy() if isinstance(pred, torch.Tensor) else np.asarray(pred)
    gt = gt.cpu().numpy() if isinstance(gt, torch.Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ContractError(f"{name} labels must be in {{0, 1}}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    miou: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def confusion(self):
        return self.tp, self.fp, self.fn, self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den, empty=0.0):
    return num / den if den > 0 else empty


def compute_metrics(counts) -> MetricReport:
    """Line-class metrics plus two-class mIoU.

    0/0 conventions: when neither mask has a line pixel the prediction is
    perfect and precision, recall, F1 and line IoU are all 1. Otherwise
    precision without predictions, recall without positives and F1 with
    P + R = 0 are 0. Background IoU follows the same empty-union rule.
    """
    tp, fp, fn, tn = (int(c) for c in counts)
    if min(tp, fp, fn, tn) < 0:
        raise ContractError(f"negative confusion count in {counts}")
    if tp + fp + fn == 0:
        p = r = f1 = iou = 1.0
    else:
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        f1 = _ratio(2 * p * r, p + r)
        iou = tp / (tp + fp + fn)
    iou_bg = _ratio(tn, tn + fp + fn, empty=1.0)
    return MetricReport(p, r, f1, iou, (iou + iou_bg) / 2, tp, fp, fn, tn)


def aggregate_dataset_metrics(per_image_counts, mode: str = "pooled") -> MetricReport:
    """Pool counts then score once (default), or average the per-image reports.

    In ``per_image`` mode the returned confusion fields are the pooled sums.
    """
    counts = [tuple(int(v) for v in c) for c in per_image_counts]
    if not counts:
        raise ValueError("cannot aggregate metrics over an empty dataset")
    pooled = tuple(int(v) for v in np.sum(np.array(counts, dtype=np.int64), axis=0))
    if mode == "pooled":
        return compute_metrics(pooled)
    if mode != "per_image":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    reports = [compute_metrics(c) for c in counts]
    mean = {k: float(np.mean([getattr(rep, k) for rep in reports]))
            for k in ("precision", "recall", "f1", "iou", "miou")}
    return MetricReport(**mean, tp=pooled[0], fp=pooled[1], fn=pooled[2], tn=pooled[3])
