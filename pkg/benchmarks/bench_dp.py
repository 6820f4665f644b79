"""Benchmark the selection knapsack: numba backend vs pure python.

Times dp_select on the toy decoder profile across grid resolutions and
prints a small table.  Run from the repository root:

    python3 benchmarks/bench_dp.py [--repeats 5] [--sizes 10000 50000 200000]
"""

import argparse
import time

import numpy as np

from adaptive_bp.graph import ModelDims, build_graph
from adaptive_bp.profiler import profile_flops
from adaptive_bp.selector import dp_select


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[10_000, 50_000, 200_000, 1_000_000])
    parser.add_argument("--rho", type=float, default=0.5)
    args = parser.parse_args()

    dims = ModelDims(blocks=2, d=32, h=2, ffn=64, vocab=32, n=20)
    profile = profile_flops(build_graph(dims), batch_size=16)
    rng = np.random.default_rng(0)
    values = np.concatenate([[np.nan], rng.random(len(profile.t_dw) - 1)])

    # first calls pay numba compilation; warm both backends out of the timing
    for backend in ("python", "numba"):
        dp_select(profile, values, args.rho, T_q=1000, backend=backend)

    print(f"{'T_q':>10}  {'python (ms)':>12}  {'numba (ms)':>12}  {'speedup':>8}")
    for T_q in args.sizes:
        res = {}
        for backend in ("python", "numba"):
            t = best_of(lambda: dp_select(profile, values, args.rho,
                                          T_q=T_q, backend=backend),
                        args.repeats)
            res[backend] = t
            plan_a = dp_select(profile, values, args.rho, T_q=T_q,
                               backend=backend)
        plan_p = dp_select(profile, values, args.rho, T_q=T_q,
                           backend="python")
        assert np.array_equal(plan_a.mask, plan_p.mask), "backends disagree"
        print(f"{T_q:>10}  {res['python'] * 1e3:>12.3f}  "
              f"{res['numba'] * 1e3:>12.3f}  "
              f"{res['python'] / res['numba']:>8.2f}x")


if __name__ == "__main__":
    main()
