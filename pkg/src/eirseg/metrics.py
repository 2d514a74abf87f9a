"""Confusion-matrix IoU, grouped mIoU and background misclassification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .protocol import BACKGROUND, IGNORE, TaskSchedule


class ConfusionAccumulator:
    """Rows are ground truth, columns predictions. Merges by addition."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionAccumulator":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
        keep = gt != IGNORE
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        if g.size and (g.max() >= self.num_classes or p.max() >= self.num_classes or p.min() < 0):
            raise ValueError("class id outside the accumulator range")
        self.matrix += np.bincount(g * self.num_classes + p, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes)
        out.matrix = self.matrix + other.matrix
        return out

    def iou(self) -> dict[int, float | None]:
        tp = np.diag(self.matrix)
        fp = self.matrix.sum(0) - tp
        fn = self.matrix.sum(1) - tp
        denom = tp + fp + fn
        return {c: (float(tp[c] / denom[c]) if denom[c] else None) for c in range(self.num_classes)}


def confusion_accumulate(pred, gt, acc: ConfusionAccumulator) -> ConfusionAccumulator:
    return acc.update(pred, gt)


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricReport:
    per_class_iou: dict[int, float | None]
    base_miou: float | None
    inc_miou: float | None
    all_miou: float | None
    bg_misclass_rate: float | None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"per_class": {str(c): v for c, v in self.per_class_iou.items()}, "base": self.base_miou,
                "inc": self.inc_miou, "all": self.all_miou, "bg_misclass": self.bg_misclass_rate,
                "step": self.step, **self.extra}

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        known = {"per_class", "base", "inc", "all", "bg_misclass", "step"}
        return cls({int(k): v for k, v in d["per_class"].items()}, d["base"], d["inc"], d["all"],
                   d["bg_misclass"], d.get("step", 0), {k: v for k, v in d.items() if k not in known})


def grouped_miou(per_class_iou: dict[int, float | None], schedule: TaskSchedule, base_step_boundary: int = 1,
                 upto_step: int | None = None) -> dict[str, float | None]:
    """base: background + classes of steps <= boundary; inc: later learned
    classes; all: background + every learned class. Undefined IoUs skipped."""
    upto = schedule.num_steps if upto_step is None else upto_step
    learned = schedule.learned_classes(upto)
    base = {BACKGROUND} | (schedule.learned_classes(min(base_step_boundary, upto)))
    inc = set(learned) - base
    get = per_class_iou.get
    return {"base": _mean(get(c) for c in sorted(base)), "inc": _mean(get(c) for c in sorted(inc)),
            "all": _mean(get(c) for c in sorted({BACKGROUND} | learned))}


class BgMisclassCounter:
    def __init__(self, target_classes):
        self.lut = np.zeros(256, dtype=bool)
        self.lut[list(target_classes)] = True
        self.hits = 0
        self.total = 0

    def update(self, pred, gt) -> None:
        tgt = self.lut[np.asarray(gt)]
        self.total += int(tgt.sum())
        self.hits += int((tgt & (np.asarray(pred) == BACKGROUND)).sum())

    @property
    def rate(self) -> float | None:
        return self.hits / self.total if self.total else None


def bg_misclass_rate(pred, gt, target_classes) -> float | None:
    """Share of target-class pixels predicted as background (None if no such pixels)."""
    c = BgMisclassCounter(target_classes)
    c.update(pred, gt)
    return c.rate
