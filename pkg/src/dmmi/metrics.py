"""oIoU / mIoU / Prec@X for targeted samples and image-level Acc for empty ones."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

THRESHOLDS = (0.5, 0.7, 0.9)


def pixel_counts(pred, gt) -> tuple[int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def iou(pred, gt) -> float:
    """Per-sample IoU of binary masks; ``gt`` must be non-empty."""
    if not np.any(gt):
        raise ValueError("IoU undefined for an empty ground truth; score it with acc instead")
    inter, union = pixel_counts(pred, gt)
    return inter / union


@dataclass
class MetricsState:
    """Commutative accumulator; IoUs kept as exact fractions."""

    intersection: int = 0
    union: int = 0
    ious: list = field(default_factory=list)
    zero_hits: int = 0
    zero_total: int = 0
    per_setting: Counter = field(default_factory=Counter)

    def merge(self, other: "MetricsState") -> "MetricsState":
        return MetricsState(self.intersection + other.intersection, self.union + other.union,
                            self.ious + other.ious, self.zero_hits + other.zero_hits,
                            self.zero_total + other.zero_total, self.per_setting + other.per_setting)


def accumulate(state: MetricsState, pred, gt, setting: str) -> MetricsState:
    state.per_setting[setting] += 1
    if setting == "one_to_zero":
        state.zero_total += 1
        state.zero_hits += int(not np.any(pred))
        return state
    if not np.any(gt):
        raise ValueError(f"{setting} sample has an empty ground-truth mask")
    inter, union = pixel_counts(pred, gt)
    state.intersection += inter
    state.union += union
    state.ious.append(Fraction(inter, union))
    return state


@dataclass
class MetricsReport:
    oiou: float | None
    miou: float | None
    prec: dict | None
    acc: float | None
    counts: dict

    def to_dict(self) -> dict:
        return {
            "oIoU": self.oiou,
            "mIoU": self.miou,
            "prec": None if self.prec is None else {str(k): v for k, v in self.prec.items()},
            "acc": self.acc,
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def finalize(state: MetricsState) -> MetricsReport:
    """Families without samples are reported as None, not zero."""
    if state.ious:
        oiou = state.intersection / state.union
        ious = sorted(state.ious)
        miou = float(sum(ious) / len(ious))
        prec = {x: sum(1 for v in ious if v > Fraction(str(x))) / len(ious) for x in THRESHOLDS}
    else:
        oiou = miou = prec = None
    acc = state.zero_hits / state.zero_total if state.zero_total else None
    return MetricsReport(oiou, miou, prec, acc, dict(sorted(state.per_setting.items())))


def evaluate(preds, gts, settings) -> MetricsReport:
    state = MetricsState()
    for p, g, s in zip(preds, gts, settings):
        accumulate(state, p, g, s)
    return finalize(state)
