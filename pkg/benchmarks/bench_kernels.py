"""Time the numba and numpy variants of the hot kernels side by side.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``. The first numba
call (compilation or cache load) is excluded from the timings.
"""
import argparse
import math
import time

import numpy as np

from action_shapley import _kernels as K
from action_shapley.domain import case_study_space


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    coords = rng.uniform(2, 8, size=(5, 2)) * (1, 4)
    med = np.array([95.0, 95.5, 99.5, 100.0, 72.5])
    queries = rng.uniform(2, 8, size=(100_000, 2)) * (1, 4)
    poly = case_study_space().boundary.vertices
    case = case_study_space()
    nodes = np.array([p.xy for p in case.points])
    yield ("idw_many 100k queries",
           lambda f: f(coords, med, queries, 2.0, 1.0, 1.0), K.idw_many_loop, K.idw_many_np)
    for n in (12, 18):
        table = rng.normal(size=1 << n)
        w = np.array([1.0 / math.comb(n - 1, s) for s in range(n)])
        yield (f"shapley_table n={n}",
               lambda f, t=table, n=n, w=w: f(t, n, 0, w, 1.0 / n), K.shapley_table_loop, K.shapley_table_np)
    yield ("pid_episode 400 steps",
           lambda f: f(nodes, np.full(5, 99.0), 2.0, 1.0, 1.0, poly, 6.0, 14.0, 90.0, 400, 0.1, 0.05, 0.0, 0.01),
           K.pid_episode_loop, K.pid_episode_np)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, call, loop, vec in cases():
        t_nb = best_of(lambda: call(loop), args.repeat)
        t_np = best_of(lambda: call(vec), args.repeat)
        print(f"{name:<24}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
