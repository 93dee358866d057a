"""Time the numba and pure-numpy variants of every hot kernel.

Usage:
  python benchmarks/bench_kernels.py [--repeat 20]

The layer shapes are the ones that dominate DeskNet-P training at batch 64.
"""

import argparse
import time

import numpy as np

from filtercorrect import _kernels as K
from filtercorrect.distortion import gaussian_kernel

CONV_CASES = [
    # (input shape, k, stride, pad)
    ((64, 3, 32, 32), 5, 1, 0),
    ((64, 32, 14, 14), 5, 1, 0),
    ((64, 64, 5, 5), 3, 1, 0),
    ((64, 24, 28, 28), 3, 1, 1),
]


def timeit(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    if not K.HAVE_NUMBA:
        print("numba not importable; only the numpy path can be timed")
        return
    for shape, k, s, p in CONV_CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = K.im2col_numpy(x, k, k, s, s, p, p)
        tag = f"{shape} k{k}s{s}p{p}"
        rows.append(
            (
                "im2col " + tag,
                timeit(lambda: K.im2col_numba(x, k, k, s, s, p, p), args.repeat),
                timeit(lambda: K.im2col_numpy(x, k, k, s, s, p, p), args.repeat),
            )
        )
        rows.append(
            (
                "col2im " + tag,
                timeit(lambda: K.col2im_numba(cols, shape, k, k, s, s, p, p), args.repeat),
                timeit(lambda: K.col2im_numpy(cols, shape, k, k, s, s, p, p), args.repeat),
            )
        )
    for shape in [(64, 32, 28, 28), (64, 64, 10, 10)]:
        x = rng.standard_normal(shape).astype(np.float32)
        y, arg = K.maxpool_forward_numpy(x, 2, 2)
        rows.append(
            (
                f"maxpool fwd {shape}",
                timeit(lambda: K.maxpool_forward_numba(x, 2, 2), args.repeat),
                timeit(lambda: K.maxpool_forward_numpy(x, 2, 2), args.repeat),
            )
        )
        rows.append(
            (
                f"maxpool bwd {shape}",
                timeit(lambda: K.maxpool_backward_numba(y, arg, shape, 2, 2), args.repeat),
                timeit(lambda: K.maxpool_backward_numpy(y, arg, shape, 2, 2), args.repeat),
            )
        )
    img = rng.uniform(0, 255, (64, 3, 32, 32))
    for sigma in (1.0, 3.0):
        ker = gaussian_kernel(sigma).weights
        rows.append(
            (
                f"blur sigma={sigma} {img.shape}",
                timeit(lambda: K.correlate_replicate_numba(img, ker), args.repeat),
                timeit(lambda: K.correlate_replicate_numpy(img, ker), args.repeat),
            )
        )
    print(f"active backend: {K.BACKEND}")
    print(f"{'kernel':48s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, tn, tp in rows:
        print(f"{name:48s} {tn * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tn:8.2f}")


if __name__ == "__main__":
    main()
