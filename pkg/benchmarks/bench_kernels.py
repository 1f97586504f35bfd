"""Compare the jitted and pure-numpy conv kernels on real model shapes.

Run with `python3 benchmarks/bench_kernels.py`. Both backends are imported
directly, so no environment flag is needed; FUSEDET_NO_NUMBA only matters
for the package itself.
"""

import argparse
import time

import numpy as np

from fusedet.kernels import numba_backend, numpy_backend

# (label, batch, cin, h, w, cout, k, stride, pad) for the conv stack this
# package actually runs: six backbone stages on a 128x128 query at batch 4,
# plus one head-tower conv per pyramid level at width 32
CONV_CASES = [
    ("backbone-1", 4, 3, 128, 128, 16, 3, 2, 1),
    ("backbone-2", 4, 16, 64, 64, 32, 3, 2, 1),
    ("backbone-3", 4, 32, 32, 32, 32, 3, 2, 1),
    ("backbone-4", 4, 32, 16, 16, 64, 3, 2, 1),
    ("backbone-5", 4, 64, 8, 8, 64, 3, 2, 1),
    ("backbone-6", 4, 64, 4, 4, 64, 3, 2, 1),
    ("tower-l4", 4, 32, 8, 8, 32, 3, 1, 1),
    ("tower-l5", 4, 32, 4, 4, 32, 3, 1, 1),
]

DEPTHWISE_CASES = [
    # (label, batch, c, h, w, k, pad): support kernel correlation
    ("correlate-l4", 4, 32, 8, 8, 5, 2),
]


def timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(backend, case, repeats, rng):
    _, b, cin, h, w, cout, k, stride, pad = case
    x = rng.standard_normal((b, cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    out = backend.conv2d_forward(x, wt, stride, pad)
    g = rng.standard_normal(out.shape).astype(np.float32)
    return (
        timed(lambda: backend.conv2d_forward(x, wt, stride, pad), repeats),
        timed(lambda: backend.conv2d_backward_input(g, wt, stride, pad, h, w),
              repeats),
        timed(lambda: backend.conv2d_backward_weight(g, x, stride, pad, k, k),
              repeats),
    )


def bench_depthwise(backend, case, repeats, rng):
    _, b, c, h, w, k, pad = case
    x = rng.standard_normal((b, c, h, w)).astype(np.float32)
    kern = rng.standard_normal((b, c, k, k)).astype(np.float32)
    out = backend.depthwise_forward(x, kern, pad)
    g = rng.standard_normal(out.shape).astype(np.float32)
    return (
        timed(lambda: backend.depthwise_forward(x, kern, pad), repeats),
        timed(lambda: backend.depthwise_backward_input(g, kern, pad), repeats),
        timed(lambda: backend.depthwise_backward_kernel(g, x, pad, k, k),
              repeats),
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'case':<14s} {'pass':<10s} {'numba ms':>9s} {'numpy ms':>9s} {'speedup':>8s}")
    totals = {"numba": 0.0, "numpy": 0.0}
    for case in CONV_CASES:
        nb = bench_conv(numba_backend, case, args.repeats, rng)
        np_ = bench_conv(numpy_backend, case, args.repeats, rng)
        for name, tb, tn in zip(("forward", "bwd-input", "bwd-weight"), nb, np_):
            totals["numba"] += tb
            totals["numpy"] += tn
            print(f"{case[0]:<14s} {name:<10s} {tb * 1e3:9.2f} {tn * 1e3:9.2f} "
                  f"{tn / tb:7.1f}x")
    for case in DEPTHWISE_CASES:
        nb = bench_depthwise(numba_backend, case, args.repeats, rng)
        np_ = bench_depthwise(numpy_backend, case, args.repeats, rng)
        for name, tb, tn in zip(("forward", "bwd-input", "bwd-kernel"), nb, np_):
            totals["numba"] += tb
            totals["numpy"] += tn
            print(f"{case[0]:<14s} {name:<10s} {tb * 1e3:9.2f} {tn * 1e3:9.2f} "
                  f"{tn / tb:7.1f}x")
    print(f"\ntotal best-of-{args.repeats}: numba {totals['numba'] * 1e3:.1f} ms, "
          f"numpy {totals['numpy'] * 1e3:.1f} ms "
          f"({totals['numpy'] / totals['numba']:.1f}x)")


if __name__ == "__main__":
    main()
