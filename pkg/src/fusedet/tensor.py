"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap contiguous row-major numpy arrays in the process-global float
mode (see dtypes). Recording is explicit: ops append backward closures to the
active Tape, opened with `with Tape():`; inference runs tape-free and pays no
graph cost. Arrays follow the C x H x W image convention throughout, with an
optional leading batch axis that every op treats uniformly.

Broadcasting is supported exactly as far as this package uses it (leading
batch axes, trailing singleton spatial axes, bias vectors); gradients are
reduced back with `_unbroadcast`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .dtypes import float_dtype, is_float64


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float_dtype(), order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=float_dtype()), requires_grad=requires_grad)


class Tape:
    """Scoped recording of primitive applications, in execution order.

    Execution order is already topological, so backward is a single reverse
    sweep. A tape is consumed by backward() and cannot record afterwards.
    """

    def __init__(self):
        self.nodes = []  # (out_tensor, backward_fn) pairs
        self.consumed = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


_ACTIVE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE


def _record(out: Tensor, fn) -> None:
    tape = _ACTIVE
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward()")
    tape.nodes.append((out, fn))


def _tracing(*tensors) -> bool:
    if _ACTIVE is None:
        return False
    for t in tensors:
        if isinstance(t, Tensor) and t.requires_grad:
            return True
    return False


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate grad buffers of everything the scalar loss depends on."""
    tape = _ACTIVE
    if tape is None:
        raise RuntimeError("backward() requires an active tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        fn(g)
    tape.nodes.clear()
    tape.consumed = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape, op: str) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not compatible")


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b)
        if _tracing(a):
            out.requires_grad = True
            _record(out, lambda g: _acc(a, _unbroadcast(g, a.data.shape)))
        return out
    _check_broadcast(a.data.shape, b.data.shape, "add")
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        out.requires_grad = True

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g, b.data.shape))

        _record(out, bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_broadcast(a.data.shape, b.data.shape, "sub")
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        out.requires_grad = True

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g, b.data.shape))

        _record(out, bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bv = b  # scalar or constant ndarray
        out = Tensor(a.data * bv)
        if _tracing(a):
            out.requires_grad = True
            _record(out, lambda g: _acc(a, _unbroadcast(g * bv, a.data.shape)))
        return out
    _check_broadcast(a.data.shape, b.data.shape, "mul")
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        out.requires_grad = True
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * bd, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * ad, b.data.shape))

        _record(out, bwd)
    return out


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    _check_broadcast(a.data.shape, b.data.shape, "div")
    out = Tensor(a.data / b.data)
    if _tracing(a, b):
        out.requires_grad = True
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g / bd, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g * ad / (bd * bd), b.data.shape))

        _record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    if _tracing(a):
        out.requires_grad = True
        mask = a.data > 0
        _record(out, lambda g: _acc(a, g * mask))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    if _tracing(a):
        out.requires_grad = True
        _record(out, lambda g: _acc(a, g * y))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _tracing(a):
        out.requires_grad = True
        ad = a.data
        _record(out, lambda g: _acc(a, g / ad))
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    if _tracing(a):
        out.requires_grad = True
        _record(out, lambda g: _acc(a, g * (0.5 / y)))
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)
    if _tracing(a):
        out.requires_grad = True
        ad = a.data
        _record(out, lambda g: _acc(a, g * p * ad ** (p - 1.0)))
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    if _tracing(a):
        out.requires_grad = True
        s = np.sign(a.data)
        _record(out, lambda g: _acc(a, g * s))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor(y)
    if _tracing(a):
        out.requires_grad = True
        _record(out, lambda g: _acc(a, g * y * (1.0 - y)))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow on large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    out = Tensor(y)
    if _tracing(a):
        out.requires_grad = True
        s = _sigmoid(x)
        _record(out, lambda g: _acc(a, g * (1.0 - s)))
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; at exact ties the gradient goes to the first argument."""
    _check_broadcast(a.data.shape, b.data.shape, "maximum")
    out = Tensor(np.maximum(a.data, b.data))
    if _tracing(a, b):
        out.requires_grad = True
        take_a = a.data >= b.data

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * take_a, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * ~take_a, b.data.shape))

        _record(out, bwd)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.data.shape, b.data.shape, "minimum")
    out = Tensor(np.minimum(a.data, b.data))
    if _tracing(a, b):
        out.requires_grad = True
        take_a = a.data <= b.data

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * take_a, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * ~take_a, b.data.shape))

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    if _tracing(a):
        out.requires_grad = True
        shape = a.data.shape
        _record(out, lambda g: _acc(a, np.broadcast_to(g, shape)))
    return out


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracing(a):
        out.requires_grad = True
        shape = a.data.shape

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, shape))

        _record(out, bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _tracing(a):
        out.requires_grad = True
        orig = a.data.shape
        _record(out, lambda g: _acc(a, g.reshape(orig)))
    return out


def permute(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    if _tracing(a):
        out.requires_grad = True
        inv = np.argsort(axes)
        _record(out, lambda g: _acc(a, g.transpose(inv)))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if _ACTIVE is not None and any(p.requires_grad for p in parts):
        out.requires_grad = True
        sizes = [p.data.shape[axis] for p in parts]
        offs = np.cumsum([0] + sizes)

        def bwd(g):
            for p, o, n in zip(parts, offs[:-1], sizes):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(o, o + n)
                    _acc(p, g[tuple(idx)])

        _record(out, bwd)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    if _tracing(a):
        out.requires_grad = True
        shape = a.data.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            _acc(a, full)

        _record(out, bwd)
    return out


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into place."""
    out = Tensor(a.data[idx])
    if _tracing(a):
        out.requires_grad = True
        shape = a.data.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            _acc(a, full)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        out.requires_grad = True
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

        _record(out, bwd)
    return out


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b for x (..., k), w (k, m), b (m,). Fused for graph economy."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"affine: inner extents differ, {x.data.shape} vs {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        y += b.data
    out = Tensor(y)
    if _tracing(x, w, b):
        out.requires_grad = True
        xd, wd = x.data, w.data

        def bwd(g):
            if x.requires_grad:
                _acc(x, g @ wd.T)
            if w.requires_grad:
                _acc(w, xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            if b is not None and b.requires_grad:
                _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

        _record(out, bwd)
    return out


def swap_last2(a: Tensor) -> Tensor:
    out = Tensor(a.data.swapaxes(-1, -2))
    if _tracing(a):
        out.requires_grad = True
        _record(out, lambda g: _acc(a, g.swapaxes(-1, -2)))
    return out


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("softmax_lastdim: non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if _tracing(a):
        out.requires_grad = True

        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _acc(a, y * (g - dot))

        _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel (last) dimension per token, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _tracing(x, gain, bias):
        out.requires_grad = True
        gd = gain.data

        def bwd(g):
            if x.requires_grad:
                dxhat = g * gd
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _acc(x, inv * (dxhat - m1 - xhat * m2))
            if gain.requires_grad:
                _acc(gain, (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
            if bias.requires_grad:
                _acc(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Spatial primitives (C x H x W, optional leading batch axis)


_SUPPORTED_KERNELS = {1: 0, 3: 1, 5: 2}


def _check_conv_geometry(kh, kw, stride, padding):
    if kh != kw or kh not in _SUPPORTED_KERNELS:
        raise ShapeError(f"unsupported kernel geometry {kh}x{kw}")
    if padding != _SUPPORTED_KERNELS[kh]:
        raise ShapeError(f"unsupported padding {padding} for {kh}x{kh} kernel")
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    cout, cin, kh, kw = w.data.shape
    _check_conv_geometry(kh, kw, stride, padding)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {xd.shape[1]} != kernel {cin}")
    y = kernels.conv2d_forward(xd, w.data, stride, padding)
    if b is not None:
        y += b.data[:, None, None]
    out = Tensor(y if batched else y[0])
    if _tracing(x, w, b):
        out.requires_grad = True
        h, wd_ = xd.shape[2], xd.shape[3]

        def bwd(g):
            gb = g if batched else g[None]
            gb = np.ascontiguousarray(gb)
            if x.requires_grad:
                dx = kernels.conv2d_backward_input(gb, w.data, stride, padding, h, wd_)
                _acc(x, dx if batched else dx[0])
            if w.requires_grad:
                _acc(w, kernels.conv2d_backward_weight(gb, xd, stride, padding, kh, kw))
            if b is not None and b.requires_grad:
                _acc(b, gb.sum(axis=(0, 2, 3)))

        _record(out, bwd)
    return out


def depthwise_conv2d(x: Tensor, k: Tensor, padding: int) -> Tensor:
    """Per-channel correlation; kernels may differ per batch element."""
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    kd = k.data if k.data.ndim == 4 else k.data[None]
    if xd.shape[:2] != kd.shape[:2]:
        raise ShapeError(
            f"depthwise_conv2d: channel mismatch {xd.shape} vs {kd.shape}")
    kh, kw = kd.shape[2], kd.shape[3]
    _check_conv_geometry(kh, kw, 1, padding)
    y = kernels.depthwise_forward(xd, kd, padding)
    out = Tensor(y if batched else y[0])
    if _tracing(x, k):
        out.requires_grad = True

        def bwd(g):
            gb = np.ascontiguousarray(g if batched else g[None])
            if x.requires_grad:
                dx = kernels.depthwise_backward_input(gb, kd, padding)
                _acc(x, dx if batched else dx[0])
            if k.requires_grad:
                dk = kernels.depthwise_backward_kernel(gb, xd, padding, kh, kw)
                _acc(k, dk if k.data.ndim == 4 else dk[0])

        _record(out, bwd)
    return out


def upsample_nearest_2x(x: Tensor) -> Tensor:
    y = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    out = Tensor(y)
    if _tracing(x):
        out.requires_grad = True
        shape = x.data.shape

        def bwd(g):
            h, w = shape[-2], shape[-1]
            gg = g.reshape(shape[:-2] + (h, 2, w, 2))
            _acc(x, gg.sum(axis=(-3, -1)))

        _record(out, bwd)
    return out


def _pool_bounds(n_in: int, n_out: int):
    # floor/ceil partitions; for n_out > n_in partitions overlap, which is
    # what lets a small support map expand into a 5x5 correlation kernel
    starts = [(i * n_in) // n_out for i in range(n_out)]
    ends = [-(-((i + 1) * n_in) // n_out) for i in range(n_out)]
    return starts, ends


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.data.shape[-2], x.data.shape[-1]
    ys, ye = _pool_bounds(h, out_h)
    xs, xe = _pool_bounds(w, out_w)
    y = np.empty(x.data.shape[:-2] + (out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            y[..., i, j] = x.data[..., ys[i]:ye[i], xs[j]:xe[j]].mean(axis=(-2, -1))
    out = Tensor(y)
    if _tracing(x):
        out.requires_grad = True
        shape = x.data.shape

        def bwd(g):
            dx = np.zeros(shape, dtype=g.dtype)
            for i in range(out_h):
                for j in range(out_w):
                    n = (ye[i] - ys[i]) * (xe[j] - xs[j])
                    dx[..., ys[i]:ye[i], xs[j]:xe[j]] += g[..., i, j, None, None] / n
            _acc(x, dx)

        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(fn, inputs: Sequence[Tensor], eps: float = 1e-5, seed: int = 0,
               denom_floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps the input tensors to a tensor of any shape; the output is reduced
    to a scalar with a fixed random projection so linear ops stay exactly
    linear. Requires float64 mode.

    denom_floor guards the relative-error denominator. The default keeps
    near-zero gradients comparable; large inputs through deep ReLU stacks
    may raise it, because a coordinate whose true gradient is suppressed to
    ~1e-7 turns finite-difference truncation noise into a large ratio while
    the absolute agreement is perfect.
    """
    if not is_float64():
        raise RuntimeError("grad_check requires float64 mode (see dtypes.set_float64)")
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = fn(*inputs)
        proj = rng.standard_normal(out.data.shape)
        loss = sum_all(mul(out, proj))
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    def scalar():
        return float((fn(*inputs).data * proj).sum())

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar()
            flat[i] = orig - eps
            lo = scalar()
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), denom_floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
