"""Analytic-versus-numeric gradient verification for the whole stack.

A registry maps check names to builders; each builder creates fresh
float64 inputs from its own seeded generator and returns the worst
relative error between backpropagated and central-difference gradients.
Rows cover every differentiable primitive, the attention components, and
each neck variant end to end, so a broken backward shows up by name.

Inputs for kinked ops (relu, abs, max, min) are sampled away from the
kink; finite differences across a non-smooth point would report a bogus
error that says nothing about the backward pass.
"""

from __future__ import annotations

import dataclasses
import time
from collections import OrderedDict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, CafParams, DenseAttentionParams,
                        TokenSequence, caf, dense_attention,
                        multi_head_attention, pma, self_attention,
                        sincos_positional_encoding_2d)
from .backbone import BackboneParams, extract_pyramid
from .dtypes import is_float64, set_float64
from .head import (BoxXYXY, HeadOutputs, HeadParams, assign_targets,
                   compute_locations, head_forward)
from .losses import bce_terms, combined_loss, focal_terms, regression_terms
from .necks import (NECK_KINDS, FpnParams, HfmParams, NeckConfig, NeckParams,
                    VfmParams, apply_neck, fpn_build, ha_finalize, ha_iterate,
                    vfm_build)
from .pyramid import FeaturePyramid
from .tensor import Tensor

DEFAULT_TOLERANCE = 1e-4

_REGISTRY: "OrderedDict[str, Callable[[np.random.Generator], float]]" = OrderedDict()


def check(name: str):
    def deco(fn):
        if name in _REGISTRY:
            raise ValueError(f"duplicate check name {name!r}")
        _REGISTRY[name] = fn
        return fn
    return deco


def registered_names() -> Tuple[str, ...]:
    return tuple(_REGISTRY)


@dataclasses.dataclass
class CheckRow:
    name: str
    max_rel_err: float
    tolerance: float
    ok: bool
    seconds: float

    def line(self) -> str:
        mark = "ok" if self.ok else "FAIL"
        return f"{self.name:<28s} {self.max_rel_err:9.3e}  {mark}"


def run_suite(names: Optional[Sequence[str]] = None,
              tolerance: float = DEFAULT_TOLERANCE,
              seed: int = 0,
              report: Optional[Callable[[CheckRow], None]] = None) -> List[CheckRow]:
    """Run the registered checks in float64 and return one row per check."""
    chosen = list(names) if names is not None else list(_REGISTRY)
    unknown = [n for n in chosen if n not in _REGISTRY]
    if unknown:
        raise KeyError(f"unknown checks: {', '.join(unknown)}")
    was64 = is_float64()
    set_float64(True)
    try:
        rows = []
        for i, name in enumerate(chosen):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            t0 = time.perf_counter()
            err = _REGISTRY[name](rng)
            row = CheckRow(name, err, tolerance, err < tolerance,
                           time.perf_counter() - t0)
            rows.append(row)
            if report is not None:
                report(row)
        return rows
    finally:
        set_float64(was64)


# ---------------------------------------------------------------------------
# Input helpers


def _randn(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _pos(rng, shape, lo=0.5, hi=1.5) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape))


def _kink_free(rng, shape) -> Tensor:
    """Values with magnitude >= 0.2 so finite differences never straddle 0."""
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(sign * rng.uniform(0.2, 1.0, shape))


def _apart(rng, shape):
    """A pair separated elementwise by at least 0.2 in either direction."""
    a = rng.standard_normal(shape)
    gap = np.where(rng.random(shape) < 0.5, -1.0, 1.0) * rng.uniform(0.2, 1.0, shape)
    return Tensor(a), Tensor(a + gap)


def _closure(fn, tensors, **kw) -> float:
    """grad_check over tensors that fn captures by reference; the numeric
    pass perturbs them in place, so the closure sees every probe."""
    return T.grad_check(lambda *_: fn(), list(tensors), **kw)


def _signal_params(fn, group, size_cap: int = 16, k: int = 4,
                   min_signal: float = 1e-3) -> List[Tensor]:
    """Small parameter tensors whose gradient under fn carries real signal.

    Some parameters have structurally zero gradients (a key-projection bias
    shifts every key identically, and row softmax is invariant to that), so
    finite differences against them only measure rounding noise. One
    analytic backward finds the small tensors worth probing; the heavy
    weight matrices are covered by the primitive checks anyway.
    """
    with T.Tape():
        out = fn()
        T.backward(T.sum_all(out))
    picks = []
    for name, t in sorted(group.named_params()):
        if t.data.size <= size_cap and t.grad is not None:
            if np.abs(t.grad).max() >= min_signal:
                picks.append(t)
    group.zero_grad()
    return picks[:k]


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives


@check("add")
def _c_add(rng):
    return T.grad_check(lambda a, b: T.add(a, b),
                        [_randn(rng, (3, 4)), _randn(rng, (3, 4))])


@check("add-broadcast")
def _c_add_b(rng):
    return T.grad_check(lambda a, b: T.add(a, b),
                        [_randn(rng, (2, 3, 4)), _randn(rng, (3, 4))])


@check("sub")
def _c_sub(rng):
    return T.grad_check(lambda a, b: T.sub(a, b),
                        [_randn(rng, (3, 4)), _randn(rng, (4,))])


@check("mul")
def _c_mul(rng):
    return T.grad_check(lambda a, b: T.mul(a, b),
                        [_randn(rng, (3, 4)), _randn(rng, (3, 4))])


@check("mul-broadcast")
def _c_mul_b(rng):
    return T.grad_check(lambda a, b: T.mul(a, b),
                        [_randn(rng, (2, 3, 1)), _randn(rng, (1, 3, 4))])


@check("div")
def _c_div(rng):
    return T.grad_check(lambda a, b: T.div(a, b),
                        [_randn(rng, (3, 4)), _pos(rng, (3, 4))])


@check("neg")
def _c_neg(rng):
    return T.grad_check(T.neg, [_randn(rng, (3, 4))])


@check("relu")
def _c_relu(rng):
    return T.grad_check(T.relu, [_kink_free(rng, (3, 4))])


@check("exp")
def _c_exp(rng):
    return T.grad_check(T.exp, [_randn(rng, (3, 4))])


@check("log")
def _c_log(rng):
    return T.grad_check(T.log, [_pos(rng, (3, 4))])


@check("sqrt")
def _c_sqrt(rng):
    return T.grad_check(T.sqrt, [_pos(rng, (3, 4))])


@check("pow_const")
def _c_pow(rng):
    return T.grad_check(lambda a: T.pow_const(a, 1.7), [_pos(rng, (3, 4))])


@check("absolute")
def _c_abs(rng):
    return T.grad_check(T.absolute, [_kink_free(rng, (3, 4))])


@check("sigmoid")
def _c_sigmoid(rng):
    return T.grad_check(T.sigmoid, [_randn(rng, (3, 4))])


@check("logsigmoid")
def _c_logsigmoid(rng):
    return T.grad_check(T.logsigmoid, [_randn(rng, (3, 4))])


@check("maximum")
def _c_maximum(rng):
    a, b = _apart(rng, (3, 4))
    return T.grad_check(T.maximum, [a, b])


@check("minimum")
def _c_minimum(rng):
    a, b = _apart(rng, (3, 4))
    return T.grad_check(T.minimum, [a, b])


@check("sum_all")
def _c_sum_all(rng):
    return T.grad_check(T.sum_all, [_randn(rng, (3, 4))])


@check("sum_axis")
def _c_sum_axis(rng):
    return T.grad_check(lambda a: T.sum_axis(a, 1), [_randn(rng, (2, 3, 4))])


@check("sum_axis-keepdims")
def _c_sum_axis_k(rng):
    return T.grad_check(lambda a: T.sum_axis(a, -1, keepdims=True),
                        [_randn(rng, (2, 3, 4))])


@check("mean_all")
def _c_mean_all(rng):
    return T.grad_check(T.mean_all, [_randn(rng, (3, 4))])


@check("softmax_lastdim")
def _c_softmax(rng):
    return T.grad_check(T.softmax_lastdim, [_randn(rng, (3, 5))])


@check("layer_norm")
def _c_layer_norm(rng):
    return T.grad_check(lambda x, g, b: T.layer_norm(x, g, b),
                        [_randn(rng, (4, 6)), _pos(rng, (6,)), _randn(rng, (6,))])


# ---------------------------------------------------------------------------
# Shape and gather primitives


@check("reshape")
def _c_reshape(rng):
    return T.grad_check(lambda a: T.reshape(a, (4, 6)), [_randn(rng, (2, 3, 4))])


@check("permute")
def _c_permute(rng):
    return T.grad_check(lambda a: T.permute(a, (2, 0, 1)), [_randn(rng, (2, 3, 4))])


@check("swap_last2")
def _c_swap(rng):
    return T.grad_check(T.swap_last2, [_randn(rng, (2, 3, 4))])


@check("concat")
def _c_concat(rng):
    return T.grad_check(lambda a, b, c: T.concat([a, b, c], axis=1),
                        [_randn(rng, (2, 2)), _randn(rng, (2, 3)), _randn(rng, (2, 1))])


@check("narrow")
def _c_narrow(rng):
    return T.grad_check(lambda a: T.narrow(a, 1, 1, 2), [_randn(rng, (3, 4))])


@check("take_rows")
def _c_take_rows(rng):
    idx = np.array([0, 2, 2, 1])  # repeats exercise scatter-add
    return T.grad_check(lambda a: T.take_rows(a, idx), [_randn(rng, (4, 3))])


# ---------------------------------------------------------------------------
# Linear algebra and convolution primitives


@check("matmul")
def _c_matmul(rng):
    return T.grad_check(T.matmul, [_randn(rng, (2, 3, 4)), _randn(rng, (2, 4, 5))])


@check("affine")
def _c_affine(rng):
    return T.grad_check(T.affine,
                        [_randn(rng, (5, 4)), _randn(rng, (4, 3)), _randn(rng, (3,))])


@check("conv2d")
def _c_conv(rng):
    return T.grad_check(lambda x, w, b: T.conv2d(x, w, b, 1, 1),
                        [_randn(rng, (2, 3, 5, 5)), _randn(rng, (4, 3, 3, 3)),
                         _randn(rng, (4,))])


@check("conv2d-stride2")
def _c_conv_s2(rng):
    return T.grad_check(lambda x, w: T.conv2d(x, w, None, 2, 1),
                        [_randn(rng, (1, 2, 6, 6)), _randn(rng, (3, 2, 3, 3))])


@check("depthwise_conv2d")
def _c_depthwise(rng):
    return T.grad_check(lambda x, k: T.depthwise_conv2d(x, k, 1),
                        [_randn(rng, (2, 3, 5, 5)), _randn(rng, (2, 3, 3, 3))])


@check("upsample_nearest_2x")
def _c_upsample(rng):
    return T.grad_check(T.upsample_nearest_2x, [_randn(rng, (1, 2, 3, 3))])


@check("adaptive_avg_pool")
def _c_pool(rng):
    return T.grad_check(lambda x: T.adaptive_avg_pool(x, 2, 2),
                        [_randn(rng, (1, 2, 5, 5))])


# ---------------------------------------------------------------------------
# Attention components

_D, _HEADS, _FFN = 8, 2, 16


def _seq(rng, h, w, level=4) -> TokenSequence:
    pos = sincos_positional_encoding_2d(h, w, _D)
    return TokenSequence(_randn(rng, (h * w, _D)), pos, [(level, h, w)])


@check("multi_head_attention")
def _c_mha(rng):
    p = AttentionParams.create(_D, _HEADS, rng)
    q, k, v = _randn(rng, (3, _D)), _randn(rng, (4, _D)), _randn(rng, (4, _D))

    def fn():
        return multi_head_attention(q, k, v, p)

    weights = [t for n, t in p.named_params() if t.data.ndim == 2]
    tensors = [q, k, v] + weights + _signal_params(fn, p)
    return _closure(fn, tensors)


@check("pma")
def _c_pma(rng):
    p = AttentionParams.create(_D, _HEADS, rng)
    q, k, v = _randn(rng, (3, _D)), _randn(rng, (4, _D)), _randn(rng, (4, _D))
    pq, pk = _randn(rng, (3, _D)), _randn(rng, (4, _D))
    return _closure(lambda: pma(q, k, v, pq, pk, p), [q, k, v, pq, pk])


@check("dense_attention")
def _c_da(rng):
    p = DenseAttentionParams.create(_D, _HEADS, rng)
    a, b = _seq(rng, 2, 2), _seq(rng, 1, 3)
    tensors = [a.tokens, b.tokens, p.ln_gain, p.ln_bias, p.mha.wo]
    return _closure(lambda: dense_attention(a, b, p).tokens, tensors)


@check("self_attention")
def _c_sa(rng):
    p = DenseAttentionParams.create(_D, _HEADS, rng)
    a = _seq(rng, 2, 3)
    return _closure(lambda: self_attention(a, p).tokens,
                    [a.tokens, p.mha.wq, p.ln_gain])


@check("caf")
def _c_caf(rng):
    p = CafParams.create(_D, _HEADS, _FFN, rng)
    a, b = _seq(rng, 2, 2), _seq(rng, 1, 2)
    tensors = [a.tokens, b.tokens, p.ffn_w1, p.ffn_b2, p.ln_gain]
    return _closure(lambda: caf(a, b, p).tokens, tensors)


@check("ha_block")
def _c_ha_block(rng):
    p = HfmParams.create(_D, _HEADS, _FFN, 1, (4,), rng)
    q, s = _seq(rng, 2, 2), _seq(rng, 1, 2)

    def fn():
        a, b = ha_iterate(q, s, p.blocks)
        return T.concat([a.tokens, b.tokens], axis=0)

    return _closure(fn, [q.tokens, s.tokens])


@check("ha_finalize")
def _c_ha_final(rng):
    p = HfmParams.create(_D, _HEADS, _FFN, 1, (4,), rng)
    q, s = _seq(rng, 2, 2), _seq(rng, 1, 2)
    return _closure(lambda: ha_finalize(q, s, p.final).tokens,
                    [q.tokens, s.tokens])


# ---------------------------------------------------------------------------
# Necks end to end

_CHANNELS = {4: 4, 5: 6}


def _pyramids(rng):
    q = FeaturePyramid({4: _randn(rng, (4, 6, 6)), 5: _randn(rng, (6, 3, 3))},
                       (96, 96))
    s = FeaturePyramid({4: _randn(rng, (4, 4, 4)), 5: _randn(rng, (6, 2, 2))},
                       (64, 64))
    return q, s


def _check_neck_kind(kind: str, rng) -> float:
    cfg = NeckConfig(kind=kind, scale_strategy="one-to-all", n_blocks=1,
                     query_levels=(4, 5), support_level=5)
    p = NeckParams.create(cfg, _CHANNELS, _D, _HEADS, _FFN, rng)
    qp, sp = _pyramids(rng)

    def fn():
        fused = apply_neck(cfg, p, qp, sp)
        return T.concat([T.reshape(fused.levels[j], (-1,))
                         for j in fused.level_ids])

    tensors = [qp.levels[4], qp.levels[5], sp.levels[5]] + _signal_params(fn, p)
    return _closure(fn, tensors)


def _register_neck_checks():
    for kind in NECK_KINDS:
        _REGISTRY[f"neck-{kind}"] = (
            lambda rng, k=kind: _check_neck_kind(k, rng))


_register_neck_checks()


@check("fpn_build")
def _c_fpn(rng):
    p = FpnParams.create(_CHANNELS, _D, rng)
    qp, _ = _pyramids(rng)

    def fn():
        out = fpn_build(qp, p)
        return T.concat([T.reshape(out.levels[j], (-1,)) for j in out.level_ids])

    return _closure(fn, [qp.levels[4], qp.levels[5]])


@check("vfm_build")
def _c_vfm(rng):
    p = VfmParams.create(_CHANNELS, _D, _HEADS, rng)
    qp, _ = _pyramids(rng)

    def fn():
        out = vfm_build(qp, p)
        return T.concat([T.reshape(out.levels[j], (-1,)) for j in out.level_ids])

    return _closure(fn, [qp.levels[4], qp.levels[5]])


# ---------------------------------------------------------------------------
# Backbone, head, and losses


@check("backbone")
def _c_backbone(rng):
    p = BackboneParams.create(rng, widths=(4, 4, 6, 6, 8, 8))
    img = _randn(rng, (3, 16, 16))

    def fn():
        pyr = extract_pyramid(img, p, taps=(4,))
        return pyr.levels[4]

    named = dict(p.named_params())
    small = [t for _, t in sorted(named.items()) if t.data.size <= 8][:3]
    return _closure(fn, [img] + small)


@check("head_forward")
def _c_head(rng):
    p = HeadParams.create(_D, (4,), rng)
    fmap = _randn(rng, (_D, 3, 3))
    pyr = FeaturePyramid({4: fmap}, (48, 48))

    def fn():
        out = head_forward(pyr, p)
        parts = [out.cls_logits[4], out.distances[4], out.ctn_logits[4]]
        return T.concat([T.reshape(x, (-1,)) for x in parts])

    tensors = [fmap, p.cls_b, p.ctn_b, p.reg_b, p.scales[0], p.tower_b[0]]
    return _closure(fn, tensors)


@check("focal_terms")
def _c_focal(rng):
    labels = np.array([1, 0, 1, 0, 0, 1])
    return T.grad_check(lambda z: focal_terms(z, labels), [_randn(rng, (6,))])


@check("bce_terms")
def _c_bce(rng):
    targets = rng.uniform(0, 1, (5,))
    return T.grad_check(lambda z: bce_terms(z, targets), [_randn(rng, (5,))])


@check("regression_terms")
def _c_regression(rng):
    locs = compute_locations(4, (2, 2)).astype(float) / 32.0
    tgt = rng.uniform(0.1, 0.5, (4, 4))

    def fn(raw):
        return regression_terms(T.exp(raw), tgt, locs)

    return T.grad_check(fn, [Tensor(rng.uniform(-1.0, -0.3, (4, 4)))])


@check("combined_loss")
def _c_combined(rng):
    locs = compute_locations(4, (2, 2))
    tgt = assign_targets({4: locs}, [BoxXYXY(4.0, 4.0, 28.0, 28.0)],
                         {4: (0.0, 100.0)})

    def fn(cls, raw, ctn):
        out = HeadOutputs({4: cls}, {4: T.exp(raw)}, {4: ctn}, (32, 32))
        return combined_loss(out, tgt, locs).total

    return T.grad_check(fn, [_randn(rng, (1, 2, 2)),
                             Tensor(rng.uniform(-0.3, 0.3, (4, 2, 2))),
                             _randn(rng, (1, 2, 2))])
