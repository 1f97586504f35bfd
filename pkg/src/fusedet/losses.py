"""Training losses: focal classification, L1 + GIoU box regression, and
centerness regression, combined with fixed weights.

Every term is built from differentiable primitives so one backward sweep
reaches all head and fusion parameters. The per-term normalizers follow the
usual anchor-free recipe: classification divides by the location count,
regression and centerness divide by the positive count, and the centerness
binary cross-entropy is weighted by the target centerness itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .head import BoxXYXY, HeadOutputs, TrainTargets
from .pyramid import map_to_tokens
from .tensor import ShapeError, Tensor

DEFAULT_LAMBDAS = (20.0, 2.0, 0.5)
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossBreakdown:
    cls_term: Tensor
    reg_term: Tensor
    ctn_term: Tensor
    total: Tensor
    n_locations: int
    n_positive: int

    def values(self) -> Tuple[float, float, float, float]:
        return (float(self.cls_term.data), float(self.reg_term.data),
                float(self.ctn_term.data), float(self.total.data))


def focal_terms(logits: Tensor, labels: np.ndarray,
                alpha: float = FOCAL_ALPHA,
                gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise focal loss against hard 0/1 labels.

    Uses log-sigmoid throughout so large-magnitude logits stay finite.
    gamma must be a nonnegative integer-valued float; gamma == 0 reduces to
    alpha-weighted binary cross-entropy exactly.
    """
    y = np.asarray(labels, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ShapeError(f"labels {y.shape} != logits {logits.data.shape}")
    log_p = T.logsigmoid(logits)
    log_q = T.logsigmoid(T.neg(logits))
    pos = T.mul(T.neg(log_p), alpha * y)
    neg = T.mul(T.neg(log_q), (1.0 - alpha) * (1.0 - y))
    if gamma == 0:
        return T.add(pos, neg)
    q = T.sigmoid(T.neg(logits))  # 1 - p
    p = T.sigmoid(logits)
    pos = T.mul(pos, T.pow_const(q, gamma))
    neg = T.mul(neg, T.pow_const(p, gamma))
    return T.add(pos, neg)


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IoU of two boxes; 1 when identical, negative when the
    enclosing hull is dominated by empty space."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    hull = ((max(a.x2, b.x2) - min(a.x1, b.x1))
            * (max(a.y2, b.y2) - min(a.y1, b.y1)))
    return inter / union - (hull - union) / hull


def _giou_graph(pred_d: Tensor, tgt_d: Tensor, locs: np.ndarray) -> Tensor:
    """Row-wise GIoU of boxes decoded from (n,4) distance tensors around
    shared locations. Both distance sets must be strictly positive so every
    decoded box contains its location and unions stay nonzero."""
    def corners(d):
        l, t = T.narrow(d, -1, 0, 1), T.narrow(d, -1, 1, 1)
        r, b = T.narrow(d, -1, 2, 1), T.narrow(d, -1, 3, 1)
        cx = locs[:, 0:1]
        cy = locs[:, 1:2]
        return (T.sub(Tensor(cx), l), T.sub(Tensor(cy), t),
                T.add(Tensor(cx), r), T.add(Tensor(cy), b))

    ax1, ay1, ax2, ay2 = corners(pred_d)
    bx1, by1, bx2, by2 = corners(tgt_d)
    iw = T.relu(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)))
    ih = T.relu(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.sub(ax2, ax1), T.sub(ay2, ay1))
    area_b = T.mul(T.sub(bx2, bx1), T.sub(by2, by1))
    union = T.sub(T.add(area_a, area_b), inter)
    hull = T.mul(T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1)),
                 T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1)))
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))


def regression_terms(pred_d: Tensor, tgt_d: np.ndarray,
                     locs: np.ndarray) -> Tensor:
    """(n,1) per-row regression loss: mean absolute distance error plus
    (1 - giou) of the decoded boxes, weighted 1:1. Units follow the inputs;
    the combined loss feeds normalized distances."""
    tgt = Tensor(np.asarray(tgt_d, dtype=pred_d.data.dtype))
    l1 = T.mul(
        T.sum_axis(T.absolute(T.sub(pred_d, tgt)), -1, keepdims=True), 0.25)
    g = _giou_graph(pred_d, tgt, locs)
    return T.add(l1, T.sub(Tensor(np.ones_like(g.data)), g))


def regression_loss(pred_d: Tensor, tgt_d: np.ndarray,
                    location: np.ndarray) -> Tensor:
    """Single-location regression loss; see regression_terms."""
    pred = T.reshape(pred_d, (1, 4))
    out = regression_terms(pred, np.asarray(tgt_d).reshape(1, 4),
                           np.asarray(location).reshape(1, 2))
    return T.sum_all(out)


def bce_terms(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against soft targets in [0,1]."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets {t.shape} != logits {logits.data.shape}")
    return T.neg(T.add(T.mul(T.logsigmoid(logits), t),
                       T.mul(T.logsigmoid(T.neg(logits)), 1.0 - t)))


def _flatten_outputs(outputs: HeadOutputs) -> Tuple[Tensor, Tensor, Tensor, int]:
    """Concatenate per-level maps into flat location-major tensors:
    cls (..., N), distances (..., N, 4), ctn (..., N)."""
    cls_parts, dist_parts, ctn_parts = [], [], []
    for j in outputs.level_ids:
        c = outputs.cls_logits[j]
        hw = c.data.shape[-2] * c.data.shape[-1]
        new = c.data.shape[:-3] + (hw,)
        cls_parts.append(T.reshape(c, new))
        ctn_parts.append(T.reshape(outputs.ctn_logits[j], new))
        dist_parts.append(map_to_tokens(outputs.distances[j]))
    cls = T.concat(cls_parts, -1)
    ctn = T.concat(ctn_parts, -1)
    dists = T.concat(dist_parts, -2)
    return cls, dists, ctn, cls.data.shape[-1]


def combined_loss(outputs: HeadOutputs, targets: TrainTargets,
                  locations: np.ndarray,
                  lambdas: Tuple[float, float, float] = DEFAULT_LAMBDAS,
                  alpha: float = FOCAL_ALPHA,
                  gamma: float = FOCAL_GAMMA) -> LossBreakdown:
    """Weighted sum of the three head losses over one episode or a batch.

    locations is the (N,2) per-location pixel-center array matching the
    flattened level order (shared across the batch). With a batch axis,
    each sample is normalized by its own positive count and terms average
    over the batch, so samples weigh equally regardless of object count.
    """
    cls, dists, ctn, n_loc = _flatten_outputs(outputs)
    labels = targets.labels
    if labels.shape != cls.data.shape:
        raise ShapeError(f"targets {labels.shape} != outputs {cls.data.shape}")
    batched = labels.ndim == 2
    n_batch = labels.shape[0] if batched else 1
    h, w = outputs.image_hw
    extent = float(max(h, w))

    cls_sum = T.sum_all(focal_terms(cls, labels, alpha, gamma))
    cls_term = T.mul(cls_sum, 1.0 / (n_batch * n_loc))

    flat_labels = labels.reshape(-1)
    pos_idx = np.flatnonzero(flat_labels == 1)
    n_pos = int(len(pos_idx))
    if batched:
        per_sample_pos = (labels == 1).sum(axis=1)
        inv = np.zeros(n_batch)
        np.divide(1.0, per_sample_pos, out=inv, where=per_sample_pos > 0)
        pos_weight = np.repeat(inv, n_loc)[pos_idx] / n_batch
    else:
        pos_weight = np.full(n_pos, 1.0 / n_pos if n_pos else 0.0)

    if n_pos == 0:
        zero = Tensor(np.zeros(()))
        total = T.mul(cls_term, lambdas[0])
        return LossBreakdown(cls_term, zero, zero, total, n_loc, 0)

    flat_dists = T.reshape(dists, (n_batch * n_loc, 4)) if batched else dists
    flat_ctn = T.reshape(ctn, (-1,)) if batched else ctn
    pred_pos = T.take_rows(flat_dists, pos_idx)
    ctn_pos = T.take_rows(T.reshape(flat_ctn, (-1, 1)), pos_idx)

    tgt_d = targets.dists.reshape(-1, 4)[pos_idx] / extent
    tgt_t = targets.centerness.reshape(-1)[pos_idx]
    locs_tiled = np.tile(locations, (n_batch, 1))[pos_idx] / extent

    reg = regression_terms(T.mul(pred_pos, 1.0 / extent), tgt_d, locs_tiled)
    reg_term = T.sum_all(T.mul(reg, pos_weight.reshape(-1, 1)))

    bce = bce_terms(ctn_pos, tgt_t.reshape(-1, 1))
    ctn_term = T.sum_all(T.mul(bce, (tgt_t * pos_weight).reshape(-1, 1)))

    total = T.add(T.add(T.mul(cls_term, lambdas[0]),
                        T.mul(reg_term, lambdas[1])),
                  T.mul(ctn_term, lambdas[2]))
    return LossBreakdown(cls_term, reg_term, ctn_term, total, n_loc, n_pos)
