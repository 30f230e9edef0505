"""Compare the numba-compiled kernels against their numpy twins.

Run ``python benchmarks/bench_kernels.py``. Each kernel is warmed up once
(compilation excluded), checked for identical output, then timed.
Shapes match what one training step at the default model size touches.
"""
import argparse
import timeit

import numpy as np

from iedp import _kernels


def cases(rng):
    x = rng.normal(size=(8, 64, 10, 10)).astype(np.float32)  # stride-16 feature map, padded
    cols = _kernels.NUMPY_KERNELS["im2col"](x, 3, 3, 1, 8, 8)
    gt = rng.integers(0, 6, size=200 * 64 * 64).astype(np.int64)
    gt[::97] = 255
    pred = rng.integers(0, 6, size=gt.size).astype(np.int64)
    inside = rng.random((5, 64, 64)) < 0.3
    depths = rng.uniform(1.0, 6.0, size=(5, 64, 64))
    classes = np.arange(5, dtype=np.int64)
    return {
        "im2col": (x, 3, 3, 1, 8, 8),
        "col2im": (cols, 8, 64, 10, 10, 3, 3, 1, 8, 8),
        "confusion": (gt, pred, 6, 255),
        "zbuffer": (inside, depths, classes, 8.0, 0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        print("numba unavailable or disabled; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  identical")
    for name, call_args in cases(rng).items():
        np_fn = _kernels.NUMPY_KERNELS[name]
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        if not _kernels.HAS_NUMBA:
            print(f"{name:<10} {t_np:>10.3f} {'-':>10} {'-':>8}  -")
            continue
        nb_fn = _kernels.COMPILED_KERNELS[name]
        ref, got = np_fn(*call_args), nb_fn(*call_args)  # also warms up compilation
        same = all(np.array_equal(a, b) for a, b in zip(ref, got)) if isinstance(ref, tuple) else np.array_equal(ref, got)
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<10} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x  {same}")


if __name__ == "__main__":
    main()
