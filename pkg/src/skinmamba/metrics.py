"""Confusion-count accumulation and the five segmentation metrics.

Counts are summed globally over all evaluated pixels (micro-averaging) and
metrics are derived once from the totals:

    mIoU = TP / (TP + FP + FN)          DSC = 2 TP / (2 TP + FP + FN)
    Acc  = (TP + TN) / total            Sen = TP / (TP + FN)
    Spe  = TN / (TN + FP)

A metric whose denominator is zero is reported as ``None`` (undefined),
never silently as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "accumulate",
    "compute_metrics",
    "format_report",
    "METRIC_NAMES",
]

METRIC_NAMES = ("mIoU", "DSC", "Acc", "Sen", "Spe")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixelwise confusion totals; immutable, combined by addition."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return {"TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn}


def accumulate(pred_mask, gt_mask, counts: ConfusionCounts) -> ConfusionCounts:
    """Add the pixelwise comparison of one prediction/target pair to `counts`.

    Both masks must share a shape and contain only {0, 1}.  Returns the
    updated counts; accumulation is a pure sum, so batch order is irrelevant.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (values in {{0, 1}})")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    delta = ConfusionCounts(
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
        tn=int((~pred & ~gt).sum()),
    )
    return counts + delta


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def compute_metrics(counts: ConfusionCounts) -> dict:
    """Derive the five metrics from confusion totals.

    Returns a dict keyed by METRIC_NAMES with float values in [0, 1], or
    ``None`` where the defining denominator is zero.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    out = {
        "mIoU": _ratio(tp, tp + fp + fn),
        "DSC": _ratio(2 * tp, 2 * tp + fp + fn),
        "Acc": _ratio(tp + tn, counts.total),
        "Sen": _ratio(tp, tp + fn),
        "Spe": _ratio(tn, tn + fp),
    }
    miou, dsc = out["mIoU"], out["DSC"]
    if miou is not None and dsc is not None:
        # algebraic identity between the overlap metrics; a violation means
        # the counts were corrupted somewhere upstream
        assert abs(dsc - 2 * miou / (1 + miou)) < 1e-12, (miou, dsc)
    return out


def format_report(counts_by_dataset: dict[str, ConfusionCounts]) -> str:
    """Render evaluation results as canonical JSON.

    One block per dataset with metrics as percentages (2 decimals, ``null``
    when undefined) plus the raw counts; the header records that counts are
    micro-averaged over pixels.
    """
    report: dict = {"aggregation": "micro (pixel counts summed over images)"}
    for name in sorted(counts_by_dataset):
        counts = counts_by_dataset[name]
        metrics = compute_metrics(counts)
        report[name] = {
            "metrics_percent": {
                k: None if v is None else round(100.0 * v, 2)
                for k, v in metrics.items()
            },
            "counts": counts.as_dict(),
        }
    return json.dumps(report, indent=2, sort_keys=True)
