"""Compare the compiled quantizer kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [n_weights] [n_centers]
"""
import sys
import timeit

import numpy as np

from quped import _kernels_py

try:
    from quped import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(n, m, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=0.3, size=n)
    c = np.sort(rng.normal(scale=0.3, size=m))
    idx = _kernels_py.assign(x, c)
    up = rng.normal(size=n)
    P = 20.0
    return {
        "assign": lambda k: k.assign(x, c),
        "prox_x": lambda k: k.prox_x(x, c, 0.01),
        "group_sum": lambda k: k.group_sum(idx, up, m),
        "signed_counts": lambda k: k.signed_counts(x, c, idx),
        "soft_quantize": lambda k: k.soft_quantize(x, c, P),
        "soft_dx": lambda k: k.soft_dx(x, c, P),
        "soft_vjp_c": lambda k: k.soft_vjp_c(x, c, P, up),
    }


def best_of(fn, repeat=5):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(n=100_000, m=4):
    if _kernels_c is None:
        print("compiled kernels are not built; only the numpy fallback is available")
    print(f"n={n} weights, m={m} centers; best-of-5 seconds per call")
    print(f"{'kernel':15s} {'numpy':>11s} {'compiled':>11s} {'speedup':>8s}")
    for name, call in cases(n, m).items():
        t_py = best_of(lambda: call(_kernels_py))
        if _kernels_c is None:
            print(f"{name:15s} {t_py:11.2e}")
            continue
        t_c = best_of(lambda: call(_kernels_c))
        print(f"{name:15s} {t_py:11.2e} {t_c:11.2e} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
