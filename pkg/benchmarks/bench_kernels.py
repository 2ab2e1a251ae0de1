"""Compare the numba kernels with their pure-numpy forms.

Run ``python benchmarks/bench_kernels.py``.  Each kernel is timed on the same
inputs in both forms after one warm-up call (which triggers compilation),
and the outputs are checked to agree before timings are reported.
"""
import argparse
import timeit

import numpy as np

from clustertmle import kernels


def _cases(n, rng):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 4))])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ np.array([0.5, 0.3, -0.2, 0.1, 0.0])))).astype(float)
    w, off = np.ones(n), np.zeros(n)
    t = rng.integers(1, 800, size=n).astype(float)
    ev = (rng.random(n) < 0.6).astype(float)
    order = np.argsort(t, kind="stable")
    Z = np.clip(np.column_stack([rng.random(n), np.full(n, y.mean()), rng.random(n)]), 0.005, 0.995)
    return {
        "irls": ((X, y, w, off, np.zeros(X.shape[1]), 50, 1e-10), kernels.irls_numpy, kernels.irls_numba),
        "km_table": ((t[order], ev[order]), kernels.km_table_numpy, kernels.km_table_numba),
        "simplex_weights": ((Z, y, np.full(3, 1 / 3), 1e-10, 50),
                            kernels.simplex_weights_loop, kernels.simplex_weights_numba),
    }


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(np.asarray(x, float), np.asarray(y, float), atol=1e-8, equal_nan=True)
               for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="200,2000,20000")
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    if not kernels.USING_NUMBA:
        print("numba inactive (CLUSTERTMLE_DISABLE_NUMBA set or numba missing); "
              "the compiled column times the plain-Python loop")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'n':>7}{'numpy ms':>12}{'numba ms':>12}{'speedup':>9}  agree")
    for n in (int(s) for s in a.sizes.split(",")):
        for name, (args, f_np, f_nb) in _cases(n, rng).items():
            f_nb(*args)
            t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=a.repeat)) * 1e3
            t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=a.repeat)) * 1e3
            ok = _agree(f_np(*args), f_nb(*args))
            print(f"{name:<16}{n:>7}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}  {ok}")


if __name__ == "__main__":
    main()
