"""Compare the numba and numpy boosting kernels on a nuisance-sized problem.

    python benchmarks/bench_backends.py [--n 500] [--targets 41] [--repeat 5]

Both backends are run in the same process through the ``use_numba`` switch
of ``fit_trees``/``predict_trees``; outputs are checked for bitwise equality.
"""

import argparse
import time

import numpy as np

from mivinfer import _backend
from mivinfer.kernels import Binner, fit_trees, predict_trees


def problem(n, targets, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    y = (X.sum(1) + rng.standard_normal(n))[:, None]
    t = np.quantile(y, np.linspace(0, 1, targets))
    Y = (y <= t[None, :]).astype(np.float64)
    b = Binner.fit(X, 32)
    return b, b.transform(X), Y


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--targets", type=int, default=41)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    b, Xb, Y = problem(args.n, args.targets)
    init = Y.mean(axis=0)
    kw = dict(n_bins=b.n_bins, rounds=args.rounds, depth=args.depth, lr=0.1, min_leaf=20)
    results = {}
    backends = [False] + ([True] if _backend.NUMBA_AVAILABLE else [])
    for use in backends:
        name = "numba" if use else "numpy"
        if use:   # compile outside the timed region
            fit_trees(Xb[:50], Y[:50, :1], init[:1], use_numba=True, **{**kw, "rounds": 1})
        t_fit, trees = best_of(lambda: fit_trees(Xb, Y, init, use_numba=use, **kw), args.repeat)
        t_pred, pred = best_of(lambda: predict_trees(Xb, init, *trees, args.depth,
                                                     use_numba=use), args.repeat)
        results[name] = (t_fit, t_pred, trees, pred)
        print(f"{name:>6}: fit {t_fit * 1e3:9.2f} ms   predict {t_pred * 1e3:8.2f} ms")
    if len(results) == 2:
        a, c = results["numba"], results["numpy"]
        same = all(np.array_equal(u, v) for u, v in zip(a[2], c[2])) and np.array_equal(a[3], c[3])
        print(f"speedup: fit x{c[0] / a[0]:.1f}, predict x{c[1] / a[1]:.1f}; "
              f"outputs bitwise equal: {same}")
    else:
        print("numba not importable; only the numpy backend was timed")


if __name__ == "__main__":
    main()
