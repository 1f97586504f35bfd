"""Detection quality: IoU, greedy matching, average precision at IoU 0.5,
and per-class reports.

AP uses the all-points form: area under the monotone precision envelope,
computed exactly from the TP/FP flag sequence. It depends only on score
ordering, never on score magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Episode
from .head import BoxXYXY, Detection


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (a.area + b.area - inter)


def match_detections(dets: Sequence[Detection], gts: Sequence[BoxXYXY],
                     iou_thresh: float = 0.5) -> List[bool]:
    """Greedy per-detection TP/FP flags.

    Detections must already be sorted by descending score (ties keep
    insertion order). Each ground-truth box matches at most one detection;
    a detection is a true positive iff its best-IoU unmatched box reaches
    the threshold.
    """
    taken = [False] * len(gts)
    flags: List[bool] = []
    for d in dets:
        box = d.box()
        best, best_i = 0.0, -1
        for i, g in enumerate(gts):
            if taken[i]:
                continue
            v = iou(box, g)
            if v > best:
                best, best_i = v, i
        if best >= iou_thresh and best_i >= 0:
            taken[best_i] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> Optional[float]:
    """Area under the monotone precision-recall envelope.

    flags must be ordered by descending score across everything pooled for
    the class. Returns None when the class has no ground truth (skipped in
    means); 0.0 when there are no detections.
    """
    if n_gt == 0:
        return None
    if not len(flags):
        return 0.0
    f = np.asarray(flags, dtype=float)
    tp = np.cumsum(f)
    precision = tp / np.arange(1, len(f) + 1)
    recall = tp / n_gt
    # envelope: precision at recall >= r, made nonincreasing right to left
    prec = np.concatenate([precision, [0.0]])
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    rec = np.concatenate([[0.0], recall])
    return float(np.sum((rec[1:] - rec[:-1]) * prec[:-1]))


@dataclass
class EvalReport:
    per_class: Dict[int, Optional[float]]
    mean_ap: float
    n_episodes: int
    n_detections: Dict[int, int] = field(default_factory=dict)

    def csv_lines(self) -> List[str]:
        lines = ["class,AP50"]
        for cid in sorted(self.per_class):
            ap = self.per_class[cid]
            lines.append(f"{cid},{'' if ap is None else format(ap, '.6f')}")
        lines.append(f"mean,{self.mean_ap:.6f}")
        return lines

    def summary(self) -> str:
        parts = [f"episodes: {self.n_episodes}"]
        for cid in sorted(self.per_class):
            ap = self.per_class[cid]
            shown = "n/a" if ap is None else f"{ap:.4f}"
            parts.append(f"class {cid:2d}: AP50 {shown} "
                         f"({self.n_detections.get(cid, 0)} detections)")
        parts.append(f"mean AP50: {self.mean_ap:.4f}")
        return "\n".join(parts)


def evaluate(detect_fn: Callable[[Episode], List[Detection]],
             eval_set: Sequence[Episode]) -> EvalReport:
    """Run the detector over every episode and pool results per class.

    Matching happens within each episode; the pooled (score, flag) pairs of
    a class are re-sorted by descending score before computing AP, with
    stable order on ties.
    """
    scored: Dict[int, List[tuple]] = {}
    n_gt: Dict[int, int] = {}
    n_det: Dict[int, int] = {}
    for ep in eval_set:
        dets = sorted(detect_fn(ep), key=lambda d: -d.score)
        flags = match_detections(dets, ep.gt_boxes)
        bucket = scored.setdefault(ep.class_id, [])
        for d, f in zip(dets, flags):
            bucket.append((d.score, f))
        n_gt[ep.class_id] = n_gt.get(ep.class_id, 0) + len(ep.gt_boxes)
        n_det[ep.class_id] = n_det.get(ep.class_id, 0) + len(dets)

    per_class: Dict[int, Optional[float]] = {}
    for cid in sorted(n_gt):
        pairs = scored.get(cid, [])
        pairs.sort(key=lambda p: -p[0])
        per_class[cid] = average_precision([f for _, f in pairs], n_gt[cid])
    present = [v for v in per_class.values() if v is not None]
    mean_ap = float(np.mean(present)) if present else 0.0
    return EvalReport(per_class, mean_ap, len(eval_set), n_det)
