"""Timing of the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs in both backends; the script checks
that the outputs agree and prints the best-of-N wall time and the speed-up.
"""

import argparse
import time

import numpy as np

from jumplab import _pure

try:
    from jumplab import _core
except ImportError:  # extension not built
    _core = None


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    absr = np.abs(rng.standard_normal(390 * 250))
    absr[rng.random(absr.size) < 0.02] = np.nan
    x = rng.standard_normal(390 * 250)
    upd = (rng.random(x.size) > 0.01).astype(np.uint8)
    rst = np.zeros(x.size, np.uint8)
    rst[::390] = 1
    shocks = np.array([500.0])
    shock_events = np.full(50, 500.0) + np.linspace(0, 1e-6, 50)
    return {
        "bipower_sigma (97,500 min, K=390)": lambda m: m.bipower_sigma(absr, 390, 2 * 390),
        "ema_carry (97,500 min)": lambda m: m.ema_carry(x, upd, rst, 0.12, 0.0),
        "hawkes_thinning (n=0.5, 2,000 min)": lambda m: m.hawkes_thinning(
            0.2, 0.5, 0.3, 1.0, 2000.0, shocks, shock_events, np.random.default_rng(1)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        print("compiled extension not available; build with pip install -e . --no-build-isolation")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38}{'pure [s]':>10}{'compiled [s]':>14}{'speed-up':>10}  agree")
    for name, call in cases(rng).items():
        tp, op = best_time(lambda: call(_pure), args.repeat)
        tc, oc = best_time(lambda: call(_core), args.repeat)
        op, oc = np.asarray(op), np.asarray(oc)
        agree = op.shape == oc.shape and np.allclose(op, oc, rtol=1e-9, atol=1e-12, equal_nan=True)
        print(f"{name:<38}{tp:>10.4f}{tc:>14.4f}{tp / tc:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
