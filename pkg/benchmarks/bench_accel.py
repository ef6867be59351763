#!/usr/bin/env python3
"""Throughput comparison of the jitted kernels vs. the numpy fallbacks.

Runs every kernel at the batch sizes the package actually uses: single
protocol calls (B=1), default-config draw batches (B=5), training
minibatches (B=64), high-sample scoring (B=256), and oracle grids
(B=8192).  JIT compilation happens before timing.

Usage: python benchmarks/bench_accel.py
"""

import time

import numpy as np

from diffurank import accel
from diffurank.accel import NUMPY_IMPLS, mlp_param_size


def timeit(fn, args, repeats=100):
    fn(*args)  # warm (and compile, on the jitted path)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def main():
    if not accel.NUMBA_ENABLED:
        print("numba backend inactive (DIFFURANK_DISABLE_NUMBA set or numba missing); "
              "nothing to compare")
        return

    rng = np.random.default_rng(0)
    dim, vocab, hidden = 16, 10, 64
    params = rng.standard_normal(mlp_param_size(dim, vocab, hidden)) * 0.1

    print(f"{'kernel':<22}{'batch':>8}{'numba':>12}{'numpy':>12}{'numba/numpy':>14}")
    for batch in (1, 5, 64, 256, 8192):
        noised = rng.standard_normal((batch, dim))
        signal = rng.random(batch)
        sigma = np.sqrt(1.0 - signal**2)
        bags = rng.random((batch, vocab))
        eps = rng.standard_normal((batch, dim))
        x0 = rng.standard_normal(dim)

        for name, args in (
            ("mlp_forward", (params, noised, signal, bags, hidden)),
            ("forward_noise_batch", (x0, signal, sigma, eps)),
        ):
            fast = timeit(getattr(accel, name), args)
            slow = timeit(NUMPY_IMPLS[name], args)
            print(f"{name:<22}{batch:>8}{fast * 1e6:>10.1f}us{slow * 1e6:>10.1f}us"
                  f"{fast / slow:>14.2f}")

    n = 3000
    x0 = rng.standard_normal((n, dim))
    bags = rng.random((n, vocab))
    signal = rng.random(n)
    sigma = np.sqrt(1.0 - signal**2)
    eps = rng.standard_normal((n, dim))
    order = rng.permutation(n)

    def epoch(fn):
        p = params.copy()
        m1 = np.zeros_like(p)
        m2 = np.zeros_like(p)
        return timeit(fn, (p, m1, m2, x0, bags, signal, sigma, eps, order,
                           64, 0, 3e-3, 0.9, 0.999, 1e-8), repeats=10)

    fast = epoch(accel.train_epoch)
    slow = epoch(NUMPY_IMPLS["train_epoch"])
    print(f"{'train_epoch':<22}{n:>8}{fast * 1e3:>10.2f}ms{slow * 1e3:>10.2f}ms"
          f"{fast / slow:>14.2f}")


if __name__ == "__main__":
    main()
