"""Time the numba and numpy clustering kernels against each other.

    python benchmarks/bench_kernels.py --workers 40 80 --repeat 5

Reports the raw kernels and the planning calls that use them (k-means
grouping and exchange refinement). Each backend is selected by swapping
the active kernel pair on ``parsfl._kernels``, so one process covers both.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from parsfl import _kernels as K
from parsfl.clustering import build_plan, default_weights, iid_reference, kmeans_label_groups, plan_utility, refine_plan
from parsfl.telemetry import MBPS, synthesize_fleet

BACKENDS = {
    "numpy": (K.exchange_table_numpy, K.sym_kl_numpy),
    "numba": (getattr(K, "exchange_table_numba", None), getattr(K, "sym_kl_numba", None)),
}


def use(backend: str) -> None:
    K.exchange_table, K.sym_kl = BACKENDS[backend]


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workload(n: int, seed: int):
    rng = np.random.default_rng(seed)
    fleet = synthesize_fleet(n, 10.0, (1, 30), seed, top_ratio=0.0625, smashed_bytes=64 * 128 * 4)
    prof = fleet.profiles(rng.dirichlet(np.full(10, 0.1), size=n))
    w = default_weights(prof, 0.5, 2 * MBPS)
    return prof, w, build_plan(prof, w, seed=seed)


def bench(n: int, repeat: int, budget: int, seed: int) -> list[tuple]:
    prof, w, start = workload(n, seed)
    phi0 = iid_reference(prof)
    X = np.array([p.label_dist for p in prof])
    rows = []
    results = {}
    for backend in ("numpy", "numba"):
        if BACKENDS[backend][0] is None:
            continue
        use(backend)
        K.sym_kl(X, X[:8], 1e-9)  # compile outside the timed region
        refine_plan(start, prof, w, phi0, 50)
        rows.append((n, backend, "sym_kl", best_of(lambda: K.sym_kl(X, X[: max(2, n // 5)], 1e-9), repeat)))
        rows.append((n, backend, "kmeans", best_of(lambda: kmeans_label_groups(prof, seed=seed), repeat)))
        rows.append((n, backend, "refine", best_of(lambda: refine_plan(start, prof, w, phi0, budget), repeat)))
        results[backend] = plan_utility(refine_plan(start, prof, w, phi0, budget), prof, w, phi0)
    if len(results) == 2 and abs(results["numpy"] - results["numba"]) > 1e-9:
        raise SystemExit(f"backends disagree at N={n}: {results}")
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, nargs="+", default=[20, 40, 80])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--budget", type=int, default=20_000, help="refinement candidate budget")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    print(f"active backend at import: {K.BACKEND}")
    print(f"{'N':>4}  {'kernel':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for n in args.workers:
        rows = bench(n, args.repeat, args.budget, args.seed)
        by = {(b, k): t for _, b, k, t in rows}
        for kernel in ("sym_kl", "kmeans", "refine"):
            tn, tb = by.get(("numpy", kernel)), by.get(("numba", kernel))
            speed = f"{tn / tb:8.1f}x" if tb else "     n/a"
            print(f"{n:>4}  {kernel:<8}{1e3 * tn:>10.3f}{1e3 * (tb or float('nan')):>10.3f}{speed}")
    use(K.BACKEND)


if __name__ == "__main__":
    main()
