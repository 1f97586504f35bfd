"""Numba-jitted conv kernels.

Inner loops run over whole output rows via strided slices so LLVM can
vectorize them; padding happens in plain numpy before entering nopython
code. Kernels are compiled per dtype (float32 for training, float64 for
gradient checks) and cached on disk.
"""

import numpy as np
from numba import njit


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _out_extent(n, pad, k, stride):
    return (n + 2 * pad - k) // stride + 1


@njit(cache=True)
def _conv_fwd(xp, w, stride, oh, ow):
    b_n, cin = xp.shape[0], xp.shape[1]
    cout, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out = np.zeros((b_n, cout, oh, ow), dtype=xp.dtype)
    for b in range(b_n):
        for co in range(cout):
            acc = out[b, co]
            for ci in range(cin):
                xc = xp[b, ci]
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[co, ci, ky, kx]
                        acc += wv * xc[ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
    return out


@njit(cache=True)
def _conv_bwd_in(g, w, stride, hp, wp):
    b_n, cout, oh, ow = g.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((b_n, cin, hp, wp), dtype=g.dtype)
    for b in range(b_n):
        for co in range(cout):
            gc = g[b, co]
            for ci in range(cin):
                dc = dxp[b, ci]
                for ky in range(kh):
                    for kx in range(kw):
                        dc[ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += w[co, ci, ky, kx] * gc
    return dxp


@njit(cache=True)
def _conv_bwd_w(g, xp, stride, kh, kw):
    b_n, cout, oh, ow = g.shape
    cin = xp.shape[1]
    dw = np.zeros((cout, cin, kh, kw), dtype=g.dtype)
    for b in range(b_n):
        for co in range(cout):
            gc = g[b, co]
            for ci in range(cin):
                xc = xp[b, ci]
                for ky in range(kh):
                    for kx in range(kw):
                        win = xc[ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
                        dw[co, ci, ky, kx] += np.sum(win * gc)
    return dw


@njit(cache=True)
def _dw_fwd(xp, k, oh, ow):
    b_n, c = xp.shape[0], xp.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    out = np.zeros((b_n, c, oh, ow), dtype=xp.dtype)
    for b in range(b_n):
        for ci in range(c):
            acc = out[b, ci]
            xc = xp[b, ci]
            for ky in range(kh):
                for kx in range(kw):
                    acc += k[b, ci, ky, kx] * xc[ky:ky + oh, kx:kx + ow]
    return out


@njit(cache=True)
def _dw_bwd_in(g, k, hp, wp):
    b_n, c, oh, ow = g.shape
    kh, kw = k.shape[2], k.shape[3]
    dxp = np.zeros((b_n, c, hp, wp), dtype=g.dtype)
    for b in range(b_n):
        for ci in range(c):
            gc = g[b, ci]
            dc = dxp[b, ci]
            for ky in range(kh):
                for kx in range(kw):
                    dc[ky:ky + oh, kx:kx + ow] += k[b, ci, ky, kx] * gc
    return dxp


@njit(cache=True)
def _dw_bwd_k(g, xp, kh, kw):
    b_n, c, oh, ow = g.shape
    dk = np.zeros((b_n, c, kh, kw), dtype=g.dtype)
    for b in range(b_n):
        for ci in range(c):
            gc = g[b, ci]
            xc = xp[b, ci]
            for ky in range(kh):
                for kx in range(kw):
                    dk[b, ci, ky, kx] = np.sum(xc[ky:ky + oh, kx:kx + ow] * gc)
    return dk


def conv2d_forward(x, w, stride, pad):
    _, _, h, wd = x.shape
    _, _, kh, kw = w.shape
    oh = _out_extent(h, pad, kh, stride)
    ow = _out_extent(wd, pad, kw, stride)
    return _conv_fwd(_pad(x, pad), w, stride, oh, ow)


def conv2d_backward_input(g, w, stride, pad, h, wd):
    dxp = _conv_bwd_in(np.ascontiguousarray(g), w, stride, h + 2 * pad, wd + 2 * pad)
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(g, x, stride, pad, kh, kw):
    return _conv_bwd_w(np.ascontiguousarray(g), _pad(x, pad), stride, kh, kw)


def depthwise_forward(x, k, pad):
    _, _, h, w = x.shape
    _, _, kh, kw = k.shape
    return _dw_fwd(_pad(x, pad), np.ascontiguousarray(k), h + 2 * pad - kh + 1, w + 2 * pad - kw + 1)


def depthwise_backward_input(g, k, pad):
    _, _, oh, ow = g.shape
    _, _, kh, kw = k.shape
    h = oh + kh - 1 - 2 * pad
    w = ow + kw - 1 - 2 * pad
    dxp = _dw_bwd_in(np.ascontiguousarray(g), np.ascontiguousarray(k), h + 2 * pad, w + 2 * pad)
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def depthwise_backward_kernel(g, x, pad, kh, kw):
    return _dw_bwd_k(np.ascontiguousarray(g), _pad(x, pad), kh, kw)
