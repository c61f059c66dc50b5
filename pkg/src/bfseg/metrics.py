"""Confusion-matrix accounting and the five evaluation metrics.

All metrics reduce a one-vs-rest pixel confusion matrix:

    accuracy     (TP+TN) / (TP+TN+FP+FN)
    specificity  TN / (TN+FP)
    sensitivity  TP / (TP+FN)
    f1           2*TP / (2*TP+FP+FN)
    jaccard      TP / (TP+FP+FN)

A 0/0 denominator returns 1.0 (vacuously perfect) and the affected metric is
flagged so reports can mark it.  Reports list columns in the fixed order
F1, SE, SP, AC, JS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bfseg.tensor import ShapeError

METRIC_ORDER = ("f1", "se", "sp", "ac", "js")

_METRIC_DENOMS = {
    "f1": lambda c: 2 * c.tp + c.fp + c.fn,
    "se": lambda c: c.tp + c.fn,
    "sp": lambda c: c.tn + c.fp,
    "ac": lambda c: c.total,
    "js": lambda c: c.tp + c.fp + c.fn,
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    def degenerate(self):
        """Names of metrics whose denominator is zero for these counts."""
        return {name for name, denom in _METRIC_DENOMS.items() if denom(self) == 0}


def confusion(pred, truth, positive_class):
    """Count one-vs-rest pixel outcomes of ``pred`` against ``truth``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if pred.size and (pred.min() < 0 or truth.min() < 0):
        raise ValueError("masks must hold non-negative class indices")
    p = pred == positive_class
    t = truth == positive_class
    return ConfusionMatrix(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def _ratio(num, denom):
    return 1.0 if denom == 0 else num / denom


def accuracy(cm):
    return _ratio(cm.tp + cm.tn, cm.total)


def specificity(cm):
    return _ratio(cm.tn, cm.tn + cm.fp)


def sensitivity(cm):
    return _ratio(cm.tp, cm.tp + cm.fn)


def f1(cm):
    return _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)


def jaccard(cm):
    return _ratio(cm.tp, cm.tp + cm.fp + cm.fn)


def all_metrics(cm):
    """The five metrics in report order."""
    return {
        "f1": f1(cm),
        "se": sensitivity(cm),
        "sp": specificity(cm),
        "ac": accuracy(cm),
        "js": jaccard(cm),
    }


@dataclass
class DatasetMetrics:
    """Pooled metrics (of the summed confusion matrix) and per-image means."""

    pooled: dict
    per_image_mean: dict
    n_images: int
    degenerate: set  # metrics hitting a 0/0 in the pooled counts or any image


def evaluate_dataset(predictions, truths, positive_class):
    preds = list(predictions)
    trues = list(truths)
    if len(preds) != len(trues):
        raise ShapeError(f"{len(preds)} predictions vs {len(trues)} truths")
    if not preds:
        raise ValueError("evaluate_dataset needs at least one image")
    matrices = [confusion(p, t, positive_class) for p, t in zip(preds, trues)]
    pooled_cm = matrices[0]
    for cm in matrices[1:]:
        pooled_cm = pooled_cm + cm
    per_image = [all_metrics(cm) for cm in matrices]
    mean = {k: float(np.mean([m[k] for m in per_image])) for k in METRIC_ORDER}
    flagged = set(pooled_cm.degenerate())
    for cm in matrices:
        flagged |= cm.degenerate()
    return DatasetMetrics(
        pooled=all_metrics(pooled_cm),
        per_image_mean=mean,
        n_images=len(preds),
        degenerate=flagged,
    )


def format_report(rows, flags=None):
    """Plain-text table with columns F1, SE, SP, AC, JS at 3 decimals.

    ``rows`` is a sequence of (name, metrics-dict) pairs; ``flags`` optionally
    maps a row name to the set of metrics to mark as degenerate (0/0 -> 1.0).
    """
    rows = list(rows)
    flags = flags or {}
    for name, values in rows:
        missing = [k for k in METRIC_ORDER if k not in values]
        if missing:
            raise ValueError(f"row {name!r} is missing metric {missing[0]!r}")
    name_w = max([len("Method")] + [len(name) for name, _ in rows])
    header = "Method".ljust(name_w) + "".join(f"{k.upper():>8}" for k in METRIC_ORDER)
    lines = [header, "-" * len(header)]
    any_flag = False
    for name, values in rows:
        cells = []
        for k in METRIC_ORDER:
            mark = "*" if k in flags.get(name, ()) else ""
            any_flag = any_flag or bool(mark)
            cells.append(f"{values[k]:.3f}{mark}".rjust(8))
        lines.append(name.ljust(name_w) + "".join(cells))
    if any_flag:
        lines.append("* degenerate denominator (0/0), reported as 1.0 by convention")
    return "\n".join(lines)


def report_csv(rows):
    """Machine-readable variant: header ``name,f1,se,sp,ac,js``."""
    out = ["name,f1,se,sp,ac,js"]
    for name, values in rows:
        missing = [k for k in METRIC_ORDER if k not in values]
        if missing:
            raise ValueError(f"row {name!r} is missing metric {missing[0]!r}")
        out.append(name + "".join(f",{values[k]:.3f}" for k in METRIC_ORDER))
    return "\n".join(out) + "\n"
