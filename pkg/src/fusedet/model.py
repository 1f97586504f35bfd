"""The full detector: Siamese backbone over query and support, cross-scale
and cross-sample fusion, anchor-free head.

One Model owns all parameters and exposes three entry points: forward (raw
head outputs), loss_on_batch (training), and detect (inference with
decoding). Both images run through the same backbone weights; fusion
conditions the query pyramid on the support features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, extract_pyramid
from .config import RunConfig
from .data import Episode
from .head import (Detection, HeadOutputs, HeadParams, TrainTargets,
                   assign_targets, compute_locations, decode_detections,
                   head_forward, pyramid_locations)
from .losses import LossBreakdown, combined_loss
from .necks import NeckParams, apply_neck
from .params import ParamGroup
from .pyramid import FeaturePyramid
from .tensor import Tensor


@dataclass
class ModelParams(ParamGroup):
    backbone: BackboneParams
    neck: NeckParams
    head: HeadParams


def calm_start(params: ModelParams) -> int:
    """Zero the cross-scale attention output projections so every pyramid
    refinement block starts as plain LayerNorm of its input.

    Freshly assembled models begin with the convolutional pathway carrying
    the whole signal; the refinement terms grow back in as training finds a
    use for them. Without this, a stack of randomly projected residual
    blocks scrambles the backbone features badly enough that early training
    optimizes the dataset prior instead of the input. The cross-sample
    fusion blocks are exempt: they are the only route from the support
    patch to the head, and silencing them leaves nothing for the support
    to condition until their output weights regrow from zero. Applied only
    at model assembly, never inside the parameter constructors, so isolated
    blocks built elsewhere keep fully random weights.

    The fusion outputs are scaled down rather than zeroed: small enough
    that six stacked residual blocks stay near-identity at the start, live
    enough that the support's influence on the loss is first-order from
    the first step.

    Returns the number of tensors touched (zero for convolutional necks).
    """
    n = 0
    for name, p in params.named_params():
        if not (name.endswith(".wo") or name.endswith(".ffn_w2")):
            continue
        if name.startswith("neck.cross_scale."):
            p.data[...] = 0.0
            n += 1
        elif name.startswith("neck.hfm."):
            p.data[...] *= 0.2
            n += 1
    return n


def _center(image: Tensor) -> Tensor:
    """Map unit-range pixels to [-1, 1]; a norm-free backbone conditions
    far better on zero-mean inputs. Images are data, not parameters, so
    plain array arithmetic is fine here."""
    return Tensor(image.data * 2.0 - 1.0)


class Model:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.neck_cfg = cfg.neck_config()
        backbone = BackboneParams.create(rng, cfg.backbone_widths)
        channels = backbone.tap_channels(cfg.query_levels)
        neck = NeckParams.create(self.neck_cfg, channels, cfg.d, cfg.heads,
                                 cfg.ffn_hidden, rng)
        head = HeadParams.create(cfg.d, tuple(cfg.query_levels), rng)
        self.params = ModelParams(backbone, neck, head)
        calm_start(self.params)

    def fused_pyramid(self, query: Tensor, support: Tensor) -> FeaturePyramid:
        taps = tuple(self.cfg.query_levels)
        qp = extract_pyramid(_center(query), self.params.backbone, taps)
        sp = extract_pyramid(_center(support), self.params.backbone, taps)
        return apply_neck(self.neck_cfg, self.params.neck, qp, sp)

    def forward(self, query: Tensor, support: Tensor) -> HeadOutputs:
        return head_forward(self.fused_pyramid(query, support),
                            self.params.head)

    def loss_on_batch(self, episodes: Sequence[Episode]) -> LossBreakdown:
        """Stack a batch of episodes, forward once, and score the combined
        objective; call under an active tape for gradients."""
        query = Tensor(np.stack([ep.query.image.data for ep in episodes]))
        support = Tensor(np.stack([ep.support.data for ep in episodes]))
        outputs = self.forward(query, support)
        locations, _ = pyramid_locations(outputs)
        grids = self._location_grids(outputs)
        ranges = self.cfg.ranges_dict()
        per_ep = [assign_targets(grids, ep.gt_boxes, ranges)
                  for ep in episodes]
        targets = TrainTargets(
            np.stack([t.labels for t in per_ep]),
            np.stack([t.dists for t in per_ep]),
            np.stack([t.centerness for t in per_ep]),
            per_ep[0].segments)
        return combined_loss(outputs, targets, locations,
                             lambdas=tuple(self.cfg.lambdas))

    def detect(self, episode: Episode) -> List[Detection]:
        outputs = self.forward(episode.query.image, episode.support)
        return decode_detections(outputs, self.cfg.score_thresh,
                                 self.cfg.nms_iou)

    @staticmethod
    def _location_grids(outputs: HeadOutputs) -> Dict[int, np.ndarray]:
        return {j: compute_locations(j, outputs.cls_logits[j].data.shape[-2:])
                for j in outputs.level_ids}
