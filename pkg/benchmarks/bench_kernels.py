"""Time the compiled clustering kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --n 50000 --k 10 --dim 6
"""
import argparse
import time

import numpy as np

from behaviorseg import _kernels, cluster


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(backend, X, C, labels, repeat):
    k = C.shape[0]
    d2 = np.full(X.shape[0], np.inf)
    return {
        "assign_labels": best_time(lambda: backend.assign_labels(X, C), repeat),
        "centroid_sums": best_time(lambda: backend.centroid_sums(X, labels, k), repeat),
        "update_min_sq_dist": best_time(lambda: backend.update_min_sq_dist(X, C[0], d2), repeat),
        "hartigan_pass": best_time(lambda: hartigan_once(backend, X, labels, k), repeat),
    }


def hartigan_once(backend, X, labels, k):
    lab = labels.copy()
    sums, counts = backend.centroid_sums(X, lab, k)
    backend.hartigan_pass(X, lab, sums, counts.astype(np.float64))


def bench_fit(backend, X, k, seed):
    saved = {n: getattr(_kernels, n) for n in ("assign_labels", "centroid_sums", "update_min_sq_dist", "hartigan_pass")}
    try:
        for n in saved:
            setattr(_kernels, n, getattr(backend, n))
        t0 = time.perf_counter()
        model = cluster.kmeans_fit(X, k, seed=seed)
        return time.perf_counter() - t0, model.wcss
    finally:
        for n, f in saved.items():
            setattr(_kernels, n, f)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    X = np.ascontiguousarray(rng.normal(size=(args.n, args.dim)))
    C = np.ascontiguousarray(X[rng.choice(args.n, args.k, replace=False)])
    labels = rng.integers(0, args.k, args.n).astype(np.int64)

    backends = [("python", _kernels.python_backend)]
    if _kernels.compiled_backend is not None:
        backends.append(("cython", _kernels.compiled_backend))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    results = {name: bench_backend(b, X, C, labels, args.repeat) for name, b in backends}
    print(f"n={args.n} k={args.k} dim={args.dim}, best of {args.repeat} (ms)")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + ("     speedup" if len(backends) > 1 else ""))
    for kernel in results["python"]:
        row = f"{kernel:<20}" + "".join(f"{results[name][kernel] * 1e3:>12.2f}" for name, _ in backends)
        if len(backends) > 1:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>11.1f}x"
        print(row)

    print(f"\nkmeans_fit K={args.k} (10 restarts)")
    for name, b in backends:
        secs, wcss = bench_fit(b, X, args.k, args.seed)
        print(f"{name:<8} {secs:8.2f} s  wcss={wcss:.6f}")


if __name__ == "__main__":
    main()
