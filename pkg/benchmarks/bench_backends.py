"""Benchmark the numba kernel backend against the pure-numpy fallback.

Usage:
    python benchmarks/bench_backends.py [--repeats N] [--budget SECONDS]

Times the hot kernels (conv forward/backward, matmul, max-pool, reductions)
at training-realistic shapes under both backends and prints a side-by-side
table. LEAFNET_BACKEND only sets the default at import; this script switches
backends explicitly.
"""

import argparse
import time

import numpy as np

from leafnet import backend

RNG = np.random.default_rng(0)


def timeit(fn, budget):
    fn()  # warm (first numba call compiles)
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < budget:
        fn()
        n += 1
    return (time.perf_counter() - t0) / n


def cases():
    x = RNG.standard_normal((32, 16, 32, 32)).astype(np.float32)
    w = RNG.standard_normal((16, 16, 3, 3)).astype(np.float32)
    dy = RNG.standard_normal((32, 16, 30, 30)).astype(np.float32)
    a = RNG.standard_normal((256, 512)).astype(np.float32)
    b = RNG.standard_normal((512, 128)).astype(np.float32)
    pool_x = RNG.standard_normal((32, 16, 32, 32)).astype(np.float32)
    red = RNG.standard_normal((2048, 1024)).astype(np.float32)

    yield "conv2d forward 32x16x32x32 k3", lambda: backend.conv2d_forward(x, w, (1, 1))
    yield "conv2d input grad", lambda: backend.conv2d_input_grad(dy, w, (1, 1), x.shape)
    yield "conv2d weight grad", lambda: backend.conv2d_weight_grad(dy, x, (1, 1), w.shape)
    yield "matmul 256x512 @ 512x128", lambda: backend.matmul_nn(a, b)
    yield "maxpool 3x3/2", lambda: backend.maxpool_forward(pool_x, (3, 3), (2, 2), (1, 1))
    yield "reduce_sum 2048x1024", lambda: backend.reduce_sum_2d(red)
    yield "channel_stats 32x16x32x32", lambda: backend.channel_stats(x)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--budget", type=float, default=0.5, help="seconds per case")
    args = ap.parse_args()

    results = {}
    for name in ("numba", "numpy"):
        backend.set_backend(name)
        for case, fn in cases():
            results.setdefault(case, {})[name] = timeit(fn, args.budget)

    width = max(len(c) for c in results)
    print(f"{'kernel'.ljust(width)}  {'numba':>12}  {'numpy':>12}  {'numba/numpy':>11}")
    for case, times in results.items():
        ratio = times["numpy"] / times["numba"]
        print(
            f"{case.ljust(width)}  {times['numba'] * 1e3:>10.2f}ms"
            f"  {times['numpy'] * 1e3:>10.2f}ms  {ratio:>10.2f}x"
        )


if __name__ == "__main__":
    main()
