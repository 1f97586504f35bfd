"""Fusion necks: cross-scale (FPN / vertical attention) and cross-sample
(prototype reweighting / kernel correlation / two-way attention) stages.

The cross-scale stage turns a backbone pyramid into a uniform-width pyramid;
the cross-sample stage injects support evidence into the query features.
Either stage composes with any partner, which is exactly the grid the
ablation study sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attention import (CafParams, DenseAttentionParams, TokenSequence, caf,
                        dense_attention, self_attention,
                        sincos_positional_encoding_2d)
from .params import ParamGroup, he_normal, xavier_uniform, zeros_param
from .pyramid import FeaturePyramid, map_to_tokens, tokens_to_map
from .tensor import ShapeError, Tensor

CROSS_SAMPLE_KINDS = ("reweighting", "correlation", "hfm")
NECK_KINDS = ("reweighting", "correlation",
              "fpn+reweighting", "fpn+correlation", "fpn+hfm",
              "vfm+reweighting", "vfm+correlation", "vfm+hfm")


@dataclass
class NeckConfig:
    kind: str = "vfm+hfm"
    scale_strategy: str = "one-to-all"  # or "corresponding"
    n_blocks: int = 6
    query_levels: Tuple[int, ...] = (4, 5, 6)
    support_level: int = 5

    def __post_init__(self):
        if self.kind not in NECK_KINDS:
            raise ValueError(f"unknown neck kind {self.kind!r}")
        if self.scale_strategy not in ("one-to-all", "corresponding"):
            raise ValueError(f"unknown scale strategy {self.scale_strategy!r}")
        if self.scale_strategy == "one-to-all":
            if not isinstance(self.support_level, int):
                raise ValueError("one-to-all takes exactly one support level")
            if self.support_level not in self.query_levels:
                raise ValueError(
                    f"support level {self.support_level} outside {self.query_levels}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be nonnegative")

    @property
    def cross_scale(self) -> Optional[str]:
        return self.kind.split("+")[0] if "+" in self.kind else None

    @property
    def cross_sample(self) -> str:
        return self.kind.split("+")[-1]


# ---------------------------------------------------------------------------
# Cross-sample: prototype reweighting and kernel correlation


def prototype_reweight(fq: Tensor, fs: Tensor) -> Tensor:
    """Channel-wise scaling of query features by the pooled support vector."""
    if fq.data.shape[-3] != fs.data.shape[-3]:
        raise ShapeError(
            f"channel mismatch: query {fq.data.shape[-3]}, support {fs.data.shape[-3]}")
    z = T.adaptive_avg_pool(fs, 1, 1)
    return T.mul(fq, z)


def kernel_correlate(fq: Tensor, fs: Tensor) -> Tensor:
    """Depthwise-correlate query features with a 5x5 kernel pooled from the
    support map; output extents match the query map."""
    if fq.data.shape[-3] != fs.data.shape[-3]:
        raise ShapeError(
            f"channel mismatch: query {fq.data.shape[-3]}, support {fs.data.shape[-3]}")
    kernel = T.adaptive_avg_pool(fs, 5, 5)
    return T.depthwise_conv2d(fq, kernel, padding=2)


# ---------------------------------------------------------------------------
# Cross-scale: FPN


@dataclass
class FpnLevelParams(ParamGroup):
    lateral_w: Tensor
    lateral_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def create(cls, c_in: int, d: int, rng) -> "FpnLevelParams":
        return cls(
            xavier_uniform(rng, (d, c_in, 1, 1), c_in, d), zeros_param(d),
            he_normal(rng, (d, d, 3, 3), d * 9), zeros_param(d))


@dataclass
class FpnParams(ParamGroup):
    per_level: List[FpnLevelParams]
    level_ids: Tuple[int, ...]

    @classmethod
    def create(cls, channels: Dict[int, int], d: int, rng) -> "FpnParams":
        ids = tuple(sorted(channels))
        return cls([FpnLevelParams.create(channels[j], d, rng) for j in ids], ids)


def _crop_to(x: Tensor, h: int, w: int) -> Tensor:
    """Trim trailing rows/columns after a 2x upsample of an odd-sized map."""
    gh, gw = x.data.shape[-2:]
    if (gh, gw) == (h, w):
        return x
    if gh < h or gw < w or gh - h > 1 or gw - w > 1:
        raise ShapeError(f"cannot align {gh}x{gw} to {h}x{w}")
    out = T.narrow(x, x.data.ndim - 2, 0, h)
    return T.narrow(out, x.data.ndim - 1, 0, w)


def fpn_build(pyr: FeaturePyramid, p: FpnParams) -> FeaturePyramid:
    """Top-down pathway: lateral 1x1, add upsampled upper output, conv 3x3."""
    ids = pyr.level_ids
    if ids != p.level_ids:
        raise ShapeError(f"pyramid levels {ids} != params levels {p.level_ids}")
    out: Dict[int, Tensor] = {}
    above: Optional[Tensor] = None
    for j in reversed(ids):
        lp = p.per_level[ids.index(j)]
        lat = T.conv2d(pyr.levels[j], lp.lateral_w, lp.lateral_b, 1, 0)
        if above is not None:
            h, w = lat.data.shape[-2:]
            lat = T.add(lat, _crop_to(T.upsample_nearest_2x(above), h, w))
        fused = T.conv2d(lat, lp.out_w, lp.out_b, 1, 1)
        out[j] = fused
        above = fused
    return FeaturePyramid(out, pyr.image_hw)


# ---------------------------------------------------------------------------
# Cross-scale: vertical attention


@dataclass
class VaLevelParams(ParamGroup):
    lateral_w: Tensor
    lateral_b: Tensor
    sa: DenseAttentionParams
    ca: Optional[DenseAttentionParams]  # None at the top level
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def create(cls, c_in: int, d: int, heads: int, rng,
               with_ca: bool) -> "VaLevelParams":
        return cls(
            xavier_uniform(rng, (d, c_in, 1, 1), c_in, d), zeros_param(d),
            DenseAttentionParams.create(d, heads, rng),
            DenseAttentionParams.create(d, heads, rng) if with_ca else None,
            he_normal(rng, (d, d, 3, 3), d * 9), zeros_param(d))


@dataclass
class VfmParams(ParamGroup):
    per_level: List[VaLevelParams]
    level_ids: Tuple[int, ...]

    @classmethod
    def create(cls, channels: Dict[int, int], d: int, heads: int,
               rng) -> "VfmParams":
        ids = tuple(sorted(channels))
        top = ids[-1]
        return cls([VaLevelParams.create(channels[j], d, heads, rng,
                                         with_ca=(j != top)) for j in ids], ids)


def _as_sequence(x: Tensor, level: int) -> TokenSequence:
    h, w = x.data.shape[-2:]
    d = x.data.shape[-3]
    pos = sincos_positional_encoding_2d(h, w, d)
    return TokenSequence(map_to_tokens(x), pos, [(level, h, w)])


def va_top(f_top: Tensor, p: VaLevelParams, level: int) -> Tensor:
    """Self-enhance the coarsest level: conv 1x1, SA over its tokens, conv 3x3."""
    lat = T.conv2d(f_top, p.lateral_w, p.lateral_b, 1, 0)
    h, w = lat.data.shape[-2:]
    enhanced = self_attention(_as_sequence(lat, level), p.sa)
    return T.conv2d(tokens_to_map(enhanced.tokens, h, w), p.out_w, p.out_b, 1, 1)


def va_block(f_j: Tensor, fused_above: Tensor, p: VaLevelParams,
             level: int) -> Tensor:
    """Fuse one level with the one above: SA on the lateral tokens, then
    cross-attention into the upsampled upper-level tokens, then conv 3x3."""
    lat = T.conv2d(f_j, p.lateral_w, p.lateral_b, 1, 0)
    h, w = lat.data.shape[-2:]
    ah, aw = fused_above.data.shape[-2:]
    if not (h in (2 * ah, 2 * ah - 1) and w in (2 * aw, 2 * aw - 1)):
        raise ShapeError(
            f"level above is {ah}x{aw}, cannot upsample to {h}x{w}")
    bar = self_attention(_as_sequence(lat, level), p.sa)
    up = _crop_to(T.upsample_nearest_2x(fused_above), h, w)
    crossed = dense_attention(bar, _as_sequence(up, level + 1), p.ca)
    return T.conv2d(tokens_to_map(crossed.tokens, h, w), p.out_w, p.out_b, 1, 1)


def vfm_build(pyr: FeaturePyramid, p: VfmParams) -> FeaturePyramid:
    ids = pyr.level_ids
    if ids != p.level_ids:
        raise ShapeError(f"pyramid levels {ids} != params levels {p.level_ids}")
    out: Dict[int, Tensor] = {}
    above: Optional[Tensor] = None
    for j in reversed(ids):
        lp = p.per_level[ids.index(j)]
        if above is None:
            fused = va_top(pyr.levels[j], lp, j)
        else:
            fused = va_block(pyr.levels[j], above, lp, j)
        out[j] = fused
        above = fused
    return FeaturePyramid(out, pyr.image_hw)


# ---------------------------------------------------------------------------
# Cross-sample: two-way attention (HA blocks) and the fusion module around it


@dataclass
class HaBlockParams(ParamGroup):
    sa_q: DenseAttentionParams
    sa_s: DenseAttentionParams
    caf_q: CafParams
    caf_s: CafParams

    @classmethod
    def create(cls, d: int, heads: int, ffn_hidden: int, rng) -> "HaBlockParams":
        return cls(DenseAttentionParams.create(d, heads, rng),
                   DenseAttentionParams.create(d, heads, rng),
                   CafParams.create(d, heads, ffn_hidden, rng),
                   CafParams.create(d, heads, ffn_hidden, rng))


@dataclass
class HaFinalizeParams(ParamGroup):
    sa_q: DenseAttentionParams
    sa_s: DenseAttentionParams
    caf_q: CafParams

    @classmethod
    def create(cls, d: int, heads: int, ffn_hidden: int, rng) -> "HaFinalizeParams":
        return cls(DenseAttentionParams.create(d, heads, rng),
                   DenseAttentionParams.create(d, heads, rng),
                   CafParams.create(d, heads, ffn_hidden, rng))


def ha_iterate(q: TokenSequence, s: TokenSequence,
               blocks: List[HaBlockParams]) -> Tuple[TokenSequence, TokenSequence]:
    """Two-way refinement: each block self-attends both sequences, then
    cross-feeds each into the other. Parameters are per block and per side."""
    if q.d != s.d:
        raise ShapeError(f"channel widths differ: {q.d} vs {s.d}")
    for blk in blocks:
        q_bar = self_attention(q, blk.sa_q)
        s_bar = self_attention(s, blk.sa_s)
        q = caf(q_bar, s_bar, blk.caf_q)
        s = caf(s_bar, q_bar, blk.caf_s)
    return q, s


def ha_finalize(q: TokenSequence, s: TokenSequence,
                p: HaFinalizeParams) -> TokenSequence:
    """One-way aggregation ending the exchange; output follows the query."""
    if q.d != s.d:
        raise ShapeError(f"channel widths differ: {q.d} vs {s.d}")
    return caf(self_attention(q, p.sa_q), self_attention(s, p.sa_s), p.caf_q)


@dataclass
class HfmParams(ParamGroup):
    blocks: List[HaBlockParams]
    final: HaFinalizeParams
    level_embed: List[Tensor]  # scale identity per query level, zero-init
    support_embed: Tensor
    level_ids: Tuple[int, ...]

    @classmethod
    def create(cls, d: int, heads: int, ffn_hidden: int, n_blocks: int,
               level_ids: Tuple[int, ...], rng) -> "HfmParams":
        return cls(
            [HaBlockParams.create(d, heads, ffn_hidden, rng)
             for _ in range(n_blocks)],
            HaFinalizeParams.create(d, heads, ffn_hidden, rng),
            [zeros_param(d) for _ in level_ids],
            zeros_param(d),
            level_ids)

    def embed_for(self, level: int) -> Tensor:
        return self.level_embed[self.level_ids.index(level)]


def _level_sequence(x: Tensor, level: int, embed: Tensor) -> TokenSequence:
    h, w = x.data.shape[-2:]
    d = x.data.shape[-3]
    pos = T.add(sincos_positional_encoding_2d(h, w, d), embed)
    return TokenSequence(map_to_tokens(x), pos, [(level, h, w)])


def _support_sequence(x: Tensor, level: int, embed: Tensor) -> TokenSequence:
    return _level_sequence(x, level, embed)


def _split_levels(seq: TokenSequence) -> Dict[int, Tensor]:
    out: Dict[int, Tensor] = {}
    offset = 0
    axis = seq.tokens.data.ndim - 2
    for level, h, w in seq.origin:
        tok = T.narrow(seq.tokens, axis, offset, h * w)
        out[level] = tokens_to_map(tok, h, w)
        offset += h * w
    return out


def hfm_fuse_one_to_all(query_pyr: FeaturePyramid, support: Tensor,
                        p: HfmParams, support_level: int) -> FeaturePyramid:
    """Fuse the whole query pyramid, as one token sequence, with a single
    support map; every query point can exchange with every support point."""
    seqs = [_level_sequence(query_pyr.levels[j], j, p.embed_for(j))
            for j in query_pyr.level_ids]
    q = TokenSequence(
        T.concat([s.tokens for s in seqs], axis=seqs[0].tokens.data.ndim - 2),
        T.concat([s.pos for s in seqs], axis=seqs[0].pos.data.ndim - 2),
        [seg for s in seqs for seg in s.origin])
    s = _support_sequence(support, support_level, p.support_embed)
    q, s = ha_iterate(q, s, p.blocks)
    fused = ha_finalize(q, s, p.final)
    return FeaturePyramid(_split_levels(fused), query_pyr.image_hw)


def hfm_fuse_corresponding(query_pyr: FeaturePyramid,
                           support_pyr: FeaturePyramid,
                           p: HfmParams) -> FeaturePyramid:
    """Fuse level j of the query with level j of the support, independently
    per level, with one shared parameter set."""
    if query_pyr.level_ids != support_pyr.level_ids:
        raise ShapeError(
            f"level sets differ: {query_pyr.level_ids} vs {support_pyr.level_ids}")
    out: Dict[int, Tensor] = {}
    for j in query_pyr.level_ids:
        q = _level_sequence(query_pyr.levels[j], j, p.embed_for(j))
        s = _support_sequence(support_pyr.levels[j], j, p.support_embed)
        q, s = ha_iterate(q, s, p.blocks)
        fused = ha_finalize(q, s, p.final)
        out[j] = _split_levels(fused)[j]
    return FeaturePyramid(out, query_pyr.image_hw)


# ---------------------------------------------------------------------------
# Whole-neck assembly


@dataclass
class LateralParams(ParamGroup):
    """Per-level 1x1 projections for necks with no cross-scale stage."""

    w: List[Tensor]
    b: List[Tensor]
    level_ids: Tuple[int, ...]

    @classmethod
    def create(cls, channels: Dict[int, int], d: int, rng) -> "LateralParams":
        ids = tuple(sorted(channels))
        return cls([xavier_uniform(rng, (d, channels[j], 1, 1), channels[j], d)
                    for j in ids],
                   [zeros_param(d) for j in ids], ids)


@dataclass
class NeckParams(ParamGroup):
    cross_scale: Optional[ParamGroup]  # FpnParams or VfmParams
    laterals: Optional[LateralParams]
    hfm: Optional[HfmParams]

    @classmethod
    def create(cls, cfg: NeckConfig, channels: Dict[int, int], d: int,
               heads: int, ffn_hidden: int, rng) -> "NeckParams":
        cross_scale = None
        laterals = None
        if cfg.cross_scale == "fpn":
            cross_scale = FpnParams.create(channels, d, rng)
        elif cfg.cross_scale == "vfm":
            cross_scale = VfmParams.create(channels, d, heads, rng)
        else:
            laterals = LateralParams.create(channels, d, rng)
        hfm = None
        if cfg.cross_sample == "hfm":
            hfm = HfmParams.create(d, heads, ffn_hidden, cfg.n_blocks,
                                   tuple(sorted(channels)), rng)
        return cls(cross_scale, laterals, hfm)


def _project(pyr: FeaturePyramid, lat: LateralParams) -> FeaturePyramid:
    out = {}
    for j, wk, bk in zip(lat.level_ids, lat.w, lat.b):
        out[j] = T.conv2d(pyr.levels[j], wk, bk, 1, 0)
    return FeaturePyramid(out, pyr.image_hw)


def apply_neck(cfg: NeckConfig, p: NeckParams, query_pyr: FeaturePyramid,
               support_pyr: FeaturePyramid) -> FeaturePyramid:
    """Cross-scale stage (shared between branches), then cross-sample stage."""
    if cfg.cross_scale == "fpn":
        qp = fpn_build(query_pyr, p.cross_scale)
        sp = fpn_build(support_pyr, p.cross_scale)
    elif cfg.cross_scale == "vfm":
        qp = vfm_build(query_pyr, p.cross_scale)
        sp = vfm_build(support_pyr, p.cross_scale)
    else:
        qp = _project(query_pyr, p.laterals)
        sp = _project(support_pyr, p.laterals)

    one_to_all = cfg.scale_strategy == "one-to-all"
    if cfg.cross_sample == "hfm":
        if one_to_all:
            return hfm_fuse_one_to_all(qp, sp.levels[cfg.support_level],
                                       p.hfm, cfg.support_level)
        return hfm_fuse_corresponding(qp, sp, p.hfm)

    fuse = prototype_reweight if cfg.cross_sample == "reweighting" else kernel_correlate
    out = {}
    for j in qp.level_ids:
        src = sp.levels[cfg.support_level] if one_to_all else sp.levels[j]
        out[j] = fuse(qp.levels[j], src)
    return FeaturePyramid(out, qp.image_hw)
