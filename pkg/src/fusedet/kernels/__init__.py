"""Convolution kernels: numba-jitted loops with a pure-numpy fallback.

The jitted path is the default. Set FUSEDET_NO_NUMBA=1 to force the numpy
(im2col) implementations; the flag is read once at import. Both backends
share the same array contracts:

    conv2d_forward(x, w, stride, pad)            x (B,Cin,H,W), w (Cout,Cin,kh,kw)
    conv2d_backward_input(g, w, stride, pad, h, w)
    conv2d_backward_weight(g, x, stride, pad, kh, kw)
    depthwise_forward(x, k, pad)                 k (B,C,kh,kw), stride 1
    depthwise_backward_input(g, k, pad)
    depthwise_backward_kernel(g, x, pad, kh, kw)

benchmarks/bench_kernels.py compares the two on the shapes this package
actually runs.
"""

import os

from . import numpy_backend

_FORCE_NUMPY = os.environ.get("FUSEDET_NO_NUMBA", "") not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from . import numba_backend as _impl
        BACKEND = "numba"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"
else:
    _impl = numpy_backend
    BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
depthwise_forward = _impl.depthwise_forward
depthwise_backward_input = _impl.depthwise_backward_input
depthwise_backward_kernel = _impl.depthwise_backward_kernel
