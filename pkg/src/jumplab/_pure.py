"""Pure numpy/Python versions of the compiled kernels in ``_core.pyx``.

Both backends consume random numbers in the same order, so a given generator
state yields the same event trains up to floating-point summation order.
"""

import math

import numpy as np

BATCH = 4096


def bipower_sigma(absr, K, max_lookback):
    absr = np.ascontiguousarray(absr, dtype=float)
    n = absr.size
    out = np.full(n, np.nan)
    if n < 2:
        return out
    prod = absr[1:] * absr[:-1]
    valid = np.isfinite(prod)
    ends = np.flatnonzero(valid) + 1  # pair (j-1, j) is indexed by its end j
    prefix = np.concatenate(([0.0], np.cumsum(prod[valid])))
    # number of valid pair ends <= t
    c = np.searchsorted(ends, np.arange(n), side="right")
    ok = c >= K
    t = np.flatnonzero(ok)
    first = ends[c[ok] - K]
    in_reach = t - first + 1 <= max_lookback
    t, cc = t[in_reach], c[ok][in_reach]
    out[t] = np.sqrt(math.pi / (2.0 * K) * (prefix[cc] - prefix[cc - K]))
    return out


def ema_carry(x, update, reset, kappa, init):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    state = init
    for t in range(x.size):
        if reset[t]:
            state = init
        v = x[t]
        if update[t] and math.isfinite(v):
            state = kappa * v + (1.0 - kappa) * state
        out[t] = state
    return out


def hawkes_thinning(lam0, n, theta, tau0, horizon, shock_times, shock_events, rng):
    amp = n * theta * tau0**theta
    expo = 1.0 + theta
    events = []
    ev = np.empty(0)
    shock_times = np.asarray(shock_times, dtype=float)
    shock_events = np.asarray(shock_events, dtype=float)
    k = j = 0
    nb = shock_times.size
    buf = None
    ui = BATCH
    t = 0.0

    def intensity(s):
        if ev.size == 0:
            return lam0
        return lam0 + amp * np.sum((s - ev + tau0) ** (-expo))

    while True:
        bound = intensity(t)
        if ui >= BATCH - 1:
            buf = rng.random(BATCH)
            ui = 0
        u1, u2 = buf[ui], buf[ui + 1]
        ui += 2
        s = horizon if bound <= 0.0 else t - math.log(1.0 - u1) / bound
        if j < nb and shock_times[j] <= s and shock_times[j] < horizon:
            tsh = shock_times[j]
            while k < shock_events.size and shock_events[k] < tsh + 1.0e-5:
                events.append(shock_events[k])
                k += 1
            ev = np.asarray(events)
            j += 1
            t = tsh + 1.0e-5
            continue
        if s >= horizon:
            break
        lam = intensity(s)
        if lam > bound * (1.0 + 1.0e-9):
            raise RuntimeError("thinning bound violated: intensity exceeds proposal bound")
        if u2 * bound <= lam:
            events.append(s)
            ev = np.asarray(events)
        t = s
    return np.sort(np.asarray(events, dtype=float))
