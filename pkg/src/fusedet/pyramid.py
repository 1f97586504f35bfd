"""Feature pyramids and the token/map reshaping that attention needs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class FeaturePyramid:
    """Ordered map of level -> feature map with stride 2^level pixels.

    Maps are (C, H_j, W_j) or batched (B, C, H_j, W_j) with
    H_j = ceil(image_h / 2^j); levels must be contiguous.
    """

    levels: Dict[int, Tensor]
    image_hw: Tuple[int, int]

    def __post_init__(self):
        ids = sorted(self.levels)
        if ids != list(range(ids[0], ids[-1] + 1)):
            raise ShapeError(f"pyramid levels {ids} are not contiguous")
        h, w = self.image_hw
        for j, m in self.levels.items():
            want = (-(-h // (1 << j)), -(-w // (1 << j)))
            got = m.data.shape[-2:]
            if got != want:
                raise ShapeError(
                    f"level {j} extents {got} do not match image {h}x{w} "
                    f"(expected {want})")

    @property
    def level_ids(self):
        return tuple(sorted(self.levels))

    def top(self) -> int:
        return max(self.levels)


def map_to_tokens(x: Tensor) -> Tensor:
    """(C,H,W) -> (H*W, C) or (B,C,H,W) -> (B, H*W, C), row-major points."""
    if x.data.ndim == 3:
        c, h, w = x.data.shape
        return T.swap_last2(T.reshape(x, (c, h * w)))
    b, c, h, w = x.data.shape
    return T.swap_last2(T.reshape(x, (b, c, h * w)))


def tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    """Inverse of map_to_tokens for a known grid."""
    if t.data.ndim == 2:
        n, c = t.data.shape
        return T.reshape(T.swap_last2(t), (c, h, w))
    b, n, c = t.data.shape
    return T.reshape(T.swap_last2(t), (b, c, h, w))
