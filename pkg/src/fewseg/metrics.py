"""Foreground IoU accumulation and mean IoU over classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["IoUAccumulator", "miou"]


@dataclass
class IoUAccumulator:
    """Per-class TP/FP/FN accumulated over an evaluation run."""
    counts: dict = field(default_factory=dict)

    def update(self, class_id: int, pred, gt) -> None:
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs mask {gt.shape}")
        tp = int(np.sum(pred & gt))
        fp = int(np.sum(pred & ~gt))
        fn = int(np.sum(~pred & gt))
        c = self.counts.setdefault(class_id, [0, 0, 0])
        c[0] += tp
        c[1] += fp
        c[2] += fn

    def result(self) -> tuple[float, dict, list]:
        """(mean IoU, per-class IoU, classes flagged for zero denominator)."""
        return miou(self.counts)


def miou(counts: dict) -> tuple[float, dict, list]:
    """Mean over classes of TP / (TP + FP + FN) on the foreground.

    counts maps class id to (tp, fp, fn). A zero denominator yields IoU 0
    for that class and the class id is returned in the flagged list.
    """
    if not counts:
        raise ValueError("miou over no classes")
    per_class, flagged = {}, []
    for cid in sorted(counts):
        tp, fp, fn = counts[cid]
        if min(tp, fp, fn) < 0:
            raise ValueError(f"negative count for class {cid}")
        denom = tp + fp + fn
        if denom == 0:
            per_class[cid] = 0.0
            flagged.append(cid)
        else:
            per_class[cid] = tp / denom
    mean = float(np.mean(list(per_class.values())))
    return mean, per_class, flagged
