"""Anchor-free detection head: shared conv tower over pyramid levels,
per-location class/box-distance/centerness predictions, target assignment,
decoding, and NMS.

Classification is binary: score means "same category as the support patch".
Box regression predicts (left, top, right, bottom) distances from each
location, exponentiated so decoded distances are strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .params import ParamGroup, full_param, he_normal, zeros_param
from .pyramid import FeaturePyramid
from .tensor import ShapeError, Tensor

# allowed max-distance band per level, pixels, scaled for 128x128 images;
# the top band is open-ended so the largest objects always have a home
DEFAULT_LEVEL_RANGES = {4: (0.0, 32.0), 5: (32.0, 64.0), 6: (64.0, 1e9)}

# classification bias starts strongly negative so an untrained head calls
# everything background; keeps early focal loss from exploding
CLS_PRIOR = 0.01


@dataclass
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass
class Detection:
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    def box(self) -> BoxXYXY:
        return BoxXYXY(self.x1, self.y1, self.x2, self.y2)

    def line(self, class_id: int) -> str:
        return (f"{class_id} {self.score:.6f} "
                f"{self.x1:.2f} {self.y1:.2f} {self.x2:.2f} {self.y2:.2f}")


@dataclass
class HeadOutputs:
    """Per-level maps; regression is stored as decoded pixel distances."""

    cls_logits: Dict[int, Tensor]
    distances: Dict[int, Tensor]
    ctn_logits: Dict[int, Tensor]
    image_hw: Tuple[int, int]

    @property
    def level_ids(self):
        return tuple(sorted(self.cls_logits))


@dataclass
class TrainTargets:
    """Flat per-location targets, levels concatenated in ascending order.

    labels/centerness are (N,) or batched (B,N); dists are (..., N, 4) and
    meaningful only where labels == 1.
    """

    labels: np.ndarray
    dists: np.ndarray
    centerness: np.ndarray
    segments: List[Tuple[int, int]]  # (level, location count)


@dataclass
class HeadParams(ParamGroup):
    tower_w: List[Tensor]
    tower_b: List[Tensor]
    cls_w: Tensor
    cls_b: Tensor
    reg_w: Tensor
    reg_b: Tensor
    ctn_w: Tensor
    ctn_b: Tensor
    scales: List[Tensor]  # one per level, ascending level order
    level_ids: Tuple[int, ...]

    @classmethod
    def create(cls, d: int, level_ids: Tuple[int, ...], rng,
               tower_depth: int = 2) -> "HeadParams":
        tower_w = [he_normal(rng, (d, d, 3, 3), d * 9) for _ in range(tower_depth)]
        tower_b = [zeros_param(d) for _ in range(tower_depth)]
        prior_bias = float(-np.log((1.0 - CLS_PRIOR) / CLS_PRIOR))
        cls_b = full_param(1, prior_bias)
        return cls(
            tower_w, tower_b,
            he_normal(rng, (1, d, 3, 3), d * 9), cls_b,
            he_normal(rng, (4, d, 3, 3), d * 9), zeros_param(4),
            he_normal(rng, (1, d, 3, 3), d * 9), zeros_param(1),
            [full_param((), 1.0) for _ in level_ids],
            tuple(level_ids))


def head_forward(fused: FeaturePyramid, p: HeadParams) -> HeadOutputs:
    """Apply the shared tower and output convolutions to every level."""
    if fused.level_ids != p.level_ids:
        raise ShapeError(f"pyramid levels {fused.level_ids} != head {p.level_ids}")
    cls_out: Dict[int, Tensor] = {}
    dist_out: Dict[int, Tensor] = {}
    ctn_out: Dict[int, Tensor] = {}
    for j, scale in zip(p.level_ids, p.scales):
        x = fused.levels[j]
        for wk, bk in zip(p.tower_w, p.tower_b):
            x = T.relu(T.conv2d(x, wk, bk, 1, 1))
        cls_out[j] = T.conv2d(x, p.cls_w, p.cls_b, 1, 1)
        raw = T.conv2d(x, p.reg_w, p.reg_b, 1, 1)
        dist_out[j] = T.exp(T.mul(raw, scale))
        ctn_out[j] = T.conv2d(x, p.ctn_w, p.ctn_b, 1, 1)
    return HeadOutputs(cls_out, dist_out, ctn_out, fused.image_hw)


def compute_locations(level: int, extents: Tuple[int, int]) -> np.ndarray:
    """(x, y) pixel centers of every cell, row-major; stride 2^level."""
    s = 1 << level
    h, w = extents
    xs = s / 2 + s * np.arange(w)
    ys = s / 2 + s * np.arange(h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def pyramid_locations(outputs: HeadOutputs) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """All locations across levels plus (level, count) segments."""
    locs, segs = [], []
    for j in outputs.level_ids:
        ext = outputs.cls_logits[j].data.shape[-2:]
        pts = compute_locations(j, ext)
        locs.append(pts)
        segs.append((j, len(pts)))
    return np.concatenate(locs, axis=0), segs


def assign_targets(locations: Dict[int, np.ndarray],
                   gt_boxes: Sequence[BoxXYXY],
                   level_ranges: Dict[int, Tuple[float, float]]) -> TrainTargets:
    """FCOS-style assignment: a location is positive iff strictly inside a
    box whose max side-distance falls in the level's band; overlaps resolve
    to the smallest box."""
    labels_parts, dists_parts, ctn_parts, segments = [], [], [], []
    boxes = np.array([b.as_array() for b in gt_boxes]).reshape(-1, 4)
    areas = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
             if len(boxes) else np.zeros(0))
    for j in sorted(locations):
        pts = locations[j]
        n = len(pts)
        labels = np.zeros(n, dtype=np.int64)
        dists = np.zeros((n, 4))
        ctn = np.zeros(n)
        if len(boxes):
            lo, hi = level_ranges[j]
            # (n, n_gt, 4) side distances
            l = pts[:, 0:1] - boxes[None, :, 0]
            t = pts[:, 1:2] - boxes[None, :, 1]
            r = boxes[None, :, 2] - pts[:, 0:1]
            b = boxes[None, :, 3] - pts[:, 1:2]
            ltrb = np.stack([l, t, r, b], axis=2)
            inside = ltrb.min(axis=2) > 0
            maxd = ltrb.max(axis=2)
            ok = inside & (maxd > lo) & (maxd <= hi)
            cand_area = np.where(ok, areas[None, :], np.inf)
            best = cand_area.argmin(axis=1)
            pos = ok[np.arange(n), best]
            labels[pos] = 1
            chosen = ltrb[np.arange(n), best]
            dists[pos] = chosen[pos]
            lr = chosen[pos][:, [0, 2]]
            tb = chosen[pos][:, [1, 3]]
            ctn[pos] = np.sqrt((lr.min(1) / lr.max(1)) * (tb.min(1) / tb.max(1)))
        labels_parts.append(labels)
        dists_parts.append(dists)
        ctn_parts.append(ctn)
        segments.append((j, n))
    return TrainTargets(np.concatenate(labels_parts),
                        np.concatenate(dists_parts, axis=0),
                        np.concatenate(ctn_parts), segments)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n,4) and (m,4) xyxy arrays."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0, None)
    ih = np.clip(iy2 - iy1, 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy suppression, descending score, ascending index on ties."""
    n = len(scores)
    order = np.lexsort((np.arange(n), -scores))
    kept: List[int] = []
    alive = np.ones(n, dtype=bool)
    iou = box_iou_matrix(boxes, boxes) if n else None
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        alive &= iou[i] <= iou_thresh
        alive[i] = False
    return kept


def decode_detections(outputs: HeadOutputs, score_thresh: float = 0.2,
                      nms_iou: float = 0.5,
                      score_mode: str = "geometric") -> List[Detection]:
    """Per-location scores from class and centerness, boxes from distances,
    threshold, then NMS. Single episode (no batch axis)."""
    h, w = outputs.image_hw
    all_boxes, all_scores = [], []
    for j in outputs.level_ids:
        cls = outputs.cls_logits[j].data.reshape(-1)
        ctn = outputs.ctn_logits[j].data.reshape(-1)
        ext = outputs.cls_logits[j].data.shape[-2:]
        dists = outputs.distances[j].data.reshape(4, -1).T
        locs = compute_locations(j, ext)
        p_cls = _sigmoid_np(cls)
        p_ctn = _sigmoid_np(ctn)
        if score_mode == "geometric":
            score = np.sqrt(p_cls * p_ctn)
        elif score_mode == "product":
            score = p_cls * p_ctn
        else:
            raise ValueError(f"unknown score mode {score_mode!r}")
        x1 = np.clip(locs[:, 0] - dists[:, 0], 0, w)
        y1 = np.clip(locs[:, 1] - dists[:, 1], 0, h)
        x2 = np.clip(locs[:, 0] + dists[:, 2], 0, w)
        y2 = np.clip(locs[:, 1] + dists[:, 3], 0, h)
        all_boxes.append(np.stack([x1, y1, x2, y2], axis=1))
        all_scores.append(score)
    boxes = np.concatenate(all_boxes, axis=0)
    scores = np.concatenate(all_scores)
    keep = scores >= score_thresh
    # clipped boxes can degenerate to zero extent at the image border
    keep &= (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[keep], scores[keep]
    kept = nms(boxes, scores, nms_iou)
    return [Detection(float(scores[i]), *(float(v) for v in boxes[i]))
            for i in kept]


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    posm = x >= 0
    out[posm] = 1.0 / (1.0 + np.exp(-x[posm]))
    ex = np.exp(x[~posm])
    out[~posm] = ex / (1.0 + ex)
    return out
