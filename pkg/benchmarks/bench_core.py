"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_core.py [--repeat 200]

Reports the per-call time of each kernel on both backends and checks that
they agree. When the extension is not built only the fallback is timed.
"""
import argparse
import timeit

import numpy as np

from safe_nmpc import core

CASES = {
    "flow (double integrator, 20 substeps)": lambda k: k.flow(2, X4, U2, D4, 0.2, 20),
    "flow (unicycle, 20 substeps)": lambda k: k.flow(3, X3, U2, D3, 0.2, 20),
    "flow_sens (double integrator)": lambda k: k.flow_sens(2, X4, U2, D4, 0.2, 20),
    "flow_sens (unicycle)": lambda k: k.flow_sens(3, X3, U2, D3, 0.2, 20),
    "jacobi_eigvalsh (8x8)": lambda k: k.jacobi_eigvalsh(S8),
}

rng = np.random.default_rng(0)
X4, U2, D4 = rng.normal(size=4), rng.normal(size=2), 0.01 * rng.normal(size=4)
X3, D3 = rng.normal(size=3), 0.01 * rng.normal(size=3)
_M = rng.normal(size=(8, 8))
S8 = _M + _M.T


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    fast, slow = core, core.fallback
    compiled = core.BACKEND != slow.BACKEND
    print(f"active backend: {core.BACKEND}")
    print(f"{'kernel':40s} {'compiled us':>12s} {'python us':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in CASES.items():
        t_py = min(timeit.repeat(lambda: fn(slow), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if compiled:
            t_c = min(timeit.repeat(lambda: fn(fast), number=args.repeat, repeat=3)) / args.repeat * 1e6
            diff = float(np.max(np.abs(_flat(fn(fast)) - _flat(fn(slow)))))
            print(f"{name:40s} {t_c:12.1f} {t_py:12.1f} {t_py / t_c:8.1f} {diff:10.1e}")
        else:
            print(f"{name:40s} {'-':>12s} {t_py:12.1f} {'-':>8s} {'-':>10s}")


if __name__ == "__main__":
    main()
