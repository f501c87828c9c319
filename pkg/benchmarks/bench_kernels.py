"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]

Times the mixture log-density (forward and backward) at training shapes and
the Hungarian solver at slot-matching sizes, checks that both backends agree
and prints the speedup per kernel.
"""
import argparse
import timeit

import numpy as np

from slotmix import kernels


def cases(rng):
    b, n, k, d = 64, 96, 7, 64
    x = rng.normal(size=(b, n, d))
    mu = rng.normal(size=(b, k, d))
    var = rng.uniform(0.5, 2.0, size=(b, k, d))
    g = rng.normal(size=(b, n, k))
    costs = [rng.random((7, 7)) for _ in range(64)]
    big = rng.random((60, 60))
    return {
        "log_gaussian_fwd (64x96x7x64)": lambda m: m.log_gaussian_fwd(x, mu, var, False),
        "log_gaussian_bwd (64x96x7x64)": lambda m: m.log_gaussian_bwd(g, x, mu, var, False),
        "hungarian 64 x (7x7)": lambda m: [m.hungarian(c) for c in costs],
        "hungarian (60x60)": lambda m: m.hungarian(big),
    }


def agree(a, b):
    if isinstance(a, list):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    if isinstance(a, tuple):
        return all(np.allclose(u, v, rtol=1e-12, atol=1e-12) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    compiled, python = kernels.compiled_backend, kernels.python_backend
    if compiled is None:
        print("compiled backend not built; only timing the Python fallback")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  agree")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(python), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:32s} {t_py:10.2f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        ok = agree(fn(python), fn(compiled))
        print(f"{name:32s} {t_py:10.2f} {t_c:12.2f} {t_py / t_c:7.1f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
