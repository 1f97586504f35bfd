"""Pure-numpy conv kernels (im2col / strided-view based)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window_view(xp, kh, kw, stride, oh, ow):
    # (B, C, kh, kw, OH, OW) read-only view over the padded input
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _out_extent(n, pad, k, stride):
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, stride, pad):
    _, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = _out_extent(h, pad, kh, stride)
    ow = _out_extent(wd, pad, kw, stride)
    cols = _window_view(_pad(x, pad), kh, kw, stride, oh, ow)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout, B, OH, OW)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_backward_input(g, w, stride, pad, h, wd):
    b, _, oh, ow = g.shape
    cout, cin, kh, kw = w.shape
    dxp = np.zeros((b, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            # (B, OH, OW, Cin) contribution of this kernel tap
            t = np.tensordot(g, w[:, :, ky, kx], axes=([1], [0]))
            dxp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += \
                t.transpose(0, 3, 1, 2)
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(g, x, stride, pad, kh, kw):
    _, _, oh, ow = g.shape
    cols = _window_view(_pad(x, pad), kh, kw, stride, oh, ow)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))


def depthwise_forward(x, k, pad):
    _, _, h, w = x.shape
    _, _, kh, kw = k.shape
    oh = _out_extent(h, pad, kh, 1)
    ow = _out_extent(w, pad, kw, 1)
    cols = _window_view(_pad(x, pad), kh, kw, 1, oh, ow)
    return np.einsum("bcyx,bcyxhw->bchw", k, cols, optimize=True)


def depthwise_backward_input(g, k, pad):
    b, c, oh, ow = g.shape
    _, _, kh, kw = k.shape
    h = oh + kh - 1 - 2 * pad
    w = ow + kw - 1 - 2 * pad
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + oh, kx:kx + ow] += k[:, :, ky, kx][:, :, None, None] * g
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def depthwise_backward_kernel(g, x, pad, kh, kw):
    _, _, oh, ow = g.shape
    cols = _window_view(_pad(x, pad), kh, kw, 1, oh, ow)
    return np.einsum("bchw,bcyxhw->bcyx", g, cols, optimize=True)
