"""Attention primitives: positional encoding, MHA, and the fused variants.

Token sequences are flattened feature maps. Positional encodings travel with
the tokens and are added to queries and keys at attention time, never to
values, so the value pathway stays purely appearance-driven.

Naming: `dense_attention` attends a query sequence into a key sequence with
residual + layer norm; `self_attention` is the same with both arguments
equal; `caf` follows cross-attention with a token-wise feed-forward block.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .params import ParamGroup, ones_param, xavier_uniform, zeros_param
from .tensor import ShapeError, Tensor


@dataclass
class TokenSequence:
    """Flattened feature points plus aligned positional encodings.

    origin records (level, height, width) segments so tokens can be refolded
    into maps after fusion; segment areas sum to the token count.
    """

    tokens: Tensor
    pos: Tensor
    origin: List[Tuple[int, int, int]]

    def __post_init__(self):
        # pos may be shared across a leading batch axis of tokens
        if self.tokens.data.shape[-2:] != self.pos.data.shape[-2:]:
            raise ShapeError(
                f"tokens {self.tokens.data.shape} and pos {self.pos.data.shape} differ")
        n = self.tokens.data.shape[-2]
        area = sum(h * w for _, h, w in self.origin)
        if area != n:
            raise ShapeError(f"origin covers {area} tokens, sequence has {n}")

    @property
    def n(self) -> int:
        return self.tokens.data.shape[-2]

    @property
    def d(self) -> int:
        return self.tokens.data.shape[-1]


@dataclass
class AttentionParams(ParamGroup):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def create(cls, d: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")

        def proj():
            return xavier_uniform(rng, (d, d), d, d), zeros_param(d)

        wq, bq = proj()
        wk, bk = proj()
        wv, bv = proj()
        wo, bo = proj()
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, heads)


@dataclass
class DenseAttentionParams(ParamGroup):
    mha: AttentionParams
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def create(cls, d: int, heads: int, rng) -> "DenseAttentionParams":
        return cls(AttentionParams.create(d, heads, rng), ones_param(d), zeros_param(d))


@dataclass
class CafParams(ParamGroup):
    da: DenseAttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def create(cls, d: int, heads: int, ffn_hidden: int, rng) -> "CafParams":
        return cls(
            DenseAttentionParams.create(d, heads, rng),
            xavier_uniform(rng, (d, ffn_hidden), d, ffn_hidden),
            zeros_param(ffn_hidden),
            xavier_uniform(rng, (ffn_hidden, d), ffn_hidden, d),
            zeros_param(d),
            ones_param(d),
            zeros_param(d),
        )


# ---------------------------------------------------------------------------
# Positional encoding


def sincos_positional_encoding_2d(h: int, w: int, d: int) -> Tensor:
    """Fixed 2D sinusoidal encoding, rows in the first d/2 channels,
    columns in the second; frequencies geometric with base 10000."""
    if d % 4:
        raise ValueError(f"channel width {d} must be divisible by 4")
    half = d // 2
    n_freq = half // 2
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) * 2.0 / half))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h * w, d))
    for axis_vals, base in ((ys.reshape(-1), 0), (xs.reshape(-1), half)):
        ang = axis_vals[:, None] * freqs[None, :]
        out[:, base + 0:base + half:2] = np.sin(ang)
        out[:, base + 1:base + half:2] = np.cos(ang)
    return Tensor(out)


# ---------------------------------------------------------------------------
# Attention-weight inspection hook

_WEIGHT_SINK: Optional[list] = None


@contextmanager
def attention_recorder():
    """Collect every softmax weight array computed inside the block."""
    global _WEIGHT_SINK
    if _WEIGHT_SINK is not None:
        raise RuntimeError("attention recorder already active")
    sink: list = []
    _WEIGHT_SINK = sink
    try:
        yield sink
    finally:
        _WEIGHT_SINK = None


# ---------------------------------------------------------------------------
# Core ops


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, d = t.data.shape[-2], t.data.shape[-1]
    dh = d // heads
    if t.data.ndim == 2:
        return T.permute(T.reshape(t, (n, heads, dh)), (1, 0, 2))
    b = t.data.shape[0]
    return T.permute(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    if t.data.ndim == 3:
        h, n, dh = t.data.shape
        return T.reshape(T.permute(t, (1, 0, 2)), (n, h * dh))
    b, h, n, dh = t.data.shape
    return T.reshape(T.permute(t, (0, 2, 1, 3)), (b, n, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         p: AttentionParams) -> Tensor:
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(
            f"key count {k.data.shape[-2]} != value count {v.data.shape[-2]}")
    d = q.data.shape[-1]
    dh = d // p.heads
    qh = _split_heads(T.affine(q, p.wq, p.bq), p.heads)
    kh = _split_heads(T.affine(k, p.wk, p.bk), p.heads)
    vh = _split_heads(T.affine(v, p.wv, p.bv), p.heads)
    scores = T.mul(T.matmul(qh, T.swap_last2(kh)), 1.0 / np.sqrt(dh))
    weights = T.softmax_lastdim(scores)
    if _WEIGHT_SINK is not None:
        _WEIGHT_SINK.append(weights.data.copy())
    mixed = _merge_heads(T.matmul(weights, vh))
    return T.affine(mixed, p.wo, p.bo)


def pma(q: Tensor, k: Tensor, v: Tensor, pos_q: Tensor, pos_k: Tensor,
        p: AttentionParams) -> Tensor:
    """Position-encoded attention: encodings go into Q and K, never V."""
    if (q.data.shape[-2:] != pos_q.data.shape[-2:]
            or k.data.shape[-2:] != pos_k.data.shape[-2:]):
        raise ShapeError("positional encoding shape does not match tokens")
    return multi_head_attention(T.add(q, pos_q), T.add(k, pos_k), v, p)


def dense_attention(fq: TokenSequence, fk: TokenSequence,
                    p: DenseAttentionParams) -> TokenSequence:
    if fq.d != fk.d:
        raise ShapeError(f"channel widths differ: {fq.d} vs {fk.d}")
    att = pma(fq.tokens, fk.tokens, fk.tokens, fq.pos, fk.pos, p.mha)
    out = T.layer_norm(T.add(fq.tokens, att), p.ln_gain, p.ln_bias)
    return TokenSequence(out, fq.pos, fq.origin)


def self_attention(f: TokenSequence, p: DenseAttentionParams) -> TokenSequence:
    return dense_attention(f, f, p)


def caf(fq: TokenSequence, fk: TokenSequence, p: CafParams) -> TokenSequence:
    """Cross-attention followed by a token-wise FFN, each with residual + LN."""
    crossed = dense_attention(fq, fk, p.da)
    h = T.affine(crossed.tokens, p.ffn_w1, p.ffn_b1)
    h = T.affine(T.relu(h), p.ffn_w2, p.ffn_b2)
    out = T.layer_norm(T.add(crossed.tokens, h), p.ln_gain, p.ln_bias)
    return TokenSequence(out, fq.pos, fq.origin)
