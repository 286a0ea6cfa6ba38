"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from rdbound import _kernels_py

try:
    from rdbound import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=1_000_000, help="elements for the smoothing kernels")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    a = rng.normal(scale=5.0, size=args.n)
    p = rng.dirichlet(np.ones(64))
    d = np.ascontiguousarray(rng.uniform(0, 1, (64, 64)))

    cases = {
        f"smooth_mu ({args.n:,})": lambda k: k.smooth_mu(a),
        f"smooth_mu_grad ({args.n:,})": lambda k: k.smooth_mu_grad(a),
        "ba_iterate 64x64, s=-8": lambda k: k.ba_iterate(p, d, -8.0, 1e-10, 100_000, False),
        "ba_iterate 2x2, s=-3 (x200)": lambda k: [k.ba_iterate(np.array([0.3, 0.7]), 1 - np.eye(2), -3.0, 1e-10, 100_000, False) for _ in range(200)],
    }
    print(f"{'kernel':32s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = best_of(lambda: fn(_kernels_py), args.repeat)
        if _kernels_c is None:
            print(f"{name:32s} {t_py*1e3:9.2f}ms {'n/a':>10s}")
            continue
        t_c = best_of(lambda: fn(_kernels_c), args.repeat)
        print(f"{name:32s} {t_py*1e3:9.2f}ms {t_c*1e3:9.2f}ms {t_py/t_c:7.1f}x")


if __name__ == "__main__":
    main()
