"""Compare the compiled and pure-Python kernel backends.

Run with ``python benchmarks/bench_kernels.py [--n N] [--repeat R]``. Prints
the best-of-R wall time per kernel for each backend and the speedup. Also
times one end-to-end DR fit with sandwich variance under each backend (the
backend is chosen at import, so each end-to-end run uses a subprocess).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fusereg import _kernels_py

try:
    from fusereg import _kernels
except ImportError:  # extension not built
    _kernels = None


def _inputs(n: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    k = 4
    pi = rng.uniform(0.2, 0.8, n)
    return {
        "expit": (rng.normal(size=n),),
        "logistic_loglik_grad_hess": (rng.normal(size=(n, 3)), (rng.uniform(size=n) < 0.5).astype(float),
                                      np.array([0.2, -0.3, 0.1])),
        "normal_expit_mean": (rng.normal(size=n), np.full(n, 0.7),
                              *[np.ascontiguousarray(a) for a in np.polynomial.hermite.hermgauss(32)]),
        "dr_factor": ((rng.uniform(size=n) < 0.5).astype(float), 1 / pi, 1 / (1 - pi),
                      rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)),
        "k_rows": ((rng.uniform(size=n) < 0.5).astype(float), 1 / pi, 1 / (1 - pi),
                   rng.normal(size=(n, k)), rng.normal(size=(n, k)), rng.normal(size=(n, k))),
    }


def bench_kernels(n: int, repeat: int) -> list[tuple[str, float, float | None]]:
    rows = []
    for name, args in _inputs(n).items():
        t_py = min(timeit.repeat(lambda: getattr(_kernels_py, name)(*args), number=5, repeat=repeat)) / 5
        t_c = None
        if _kernels is not None:
            t_c = min(timeit.repeat(lambda: getattr(_kernels, name)(*args), number=5, repeat=repeat)) / 5
        rows.append((name, t_py, t_c))
    return rows


END_TO_END = """
import time, warnings
from fusereg import kernels
from fusereg.simulation import DgpParams, generate_dataset, fit_replicate
ds = [generate_dataset(DgpParams(), 2000, s) for s in range(5)]
t = time.perf_counter()
for d in ds:
    fit_replicate(d, "i")
print(kernels.BACKEND, (time.perf_counter() - t) / 5)
"""


def bench_end_to_end() -> list[str]:
    out = []
    for pure in ("0", "1"):
        env = {**os.environ, "FUSEREG_PURE_PYTHON": pure}
        res = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        backend, sec = res.stdout.split()
        out.append(f"{'replicate (IPW+IMP+DR, n=2000)':34s} {backend:>8s} {1e3 * float(sec):10.2f} ms")
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    print(f"n = {args.n}; compiled backend {'available' if _kernels is not None else 'NOT built'}")
    print(f"{'kernel':34s} {'python':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, t_py, t_c in bench_kernels(args.n, args.repeat):
        c = "-" if t_c is None else f"{1e3 * t_c:8.3f}ms"
        sp = "-" if t_c is None else f"{t_py / t_c:7.1f}x"
        print(f"{name:34s} {1e3 * t_py:8.3f}ms {c:>10s} {sp:>8s}")
    if not args.skip_end_to_end:
        print()
        for line in bench_end_to_end():
            print(line)


if __name__ == "__main__":
    main()
