"""Siamese feature extractor: strided conv stages tapped at three strides.

One parameter set serves query images and support patches alike; sharing is
what makes the two feature spaces comparable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import tensor as T
from .params import ParamGroup, he_normal, zeros_param
from .pyramid import FeaturePyramid
from .tensor import ShapeError, Tensor

DEFAULT_WIDTHS = (16, 32, 32, 64, 64, 64)


@dataclass
class BackboneParams(ParamGroup):
    weights: List[Tensor]
    biases: List[Tensor]

    @classmethod
    def create(cls, rng: np.random.Generator,
               widths: Tuple[int, ...] = DEFAULT_WIDTHS) -> "BackboneParams":
        weights, biases = [], []
        c_in = 3
        for c_out in widths:
            weights.append(he_normal(rng, (c_out, c_in, 3, 3), c_in * 9))
            biases.append(zeros_param(c_out))
            c_in = c_out
        return cls(weights, biases)

    @property
    def stages(self) -> int:
        return len(self.weights)

    def tap_channels(self, taps=(4, 5, 6)):
        return {j: self.weights[j - 1].data.shape[0] for j in taps}


def extract_pyramid(image: Tensor, p: BackboneParams,
                    taps=(4, 5, 6)) -> FeaturePyramid:
    """Run the strided stages and collect the maps at the tapped strides."""
    h, w = image.data.shape[-2:]
    need = 1 << max(taps)
    if h % need or w % need:
        raise ShapeError(f"image extents {h}x{w} not divisible by {need}")
    x = image
    levels = {}
    for stage, (wk, bk) in enumerate(zip(p.weights, p.biases), start=1):
        x = T.relu(T.conv2d(x, wk, bk, stride=2, padding=1))
        if stage in taps:
            levels[stage] = x
    return FeaturePyramid(levels, (h, w))
