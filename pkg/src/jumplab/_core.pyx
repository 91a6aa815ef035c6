# cython: language_level=3
"""Compiled inner loops. Signatures mirror :mod:`jumplab._pure` exactly."""

import numpy as np

from libc.math cimport isfinite, sqrt, pow, log, M_PI

cdef Py_ssize_t BATCH = 4096


def bipower_sigma(double[::1] absr, Py_ssize_t K, Py_ssize_t max_lookback):
    """Rolling bipower volatility over the K most recent valid adjacent pairs."""
    cdef Py_ssize_t n = absr.shape[0]
    cdef Py_ssize_t t, j, c, first
    cdef double prod
    out_arr = np.full(n, np.nan)
    cdef double[::1] out = out_arr
    # prefix[k] = sum of the first k valid pair products; pos[k] = pair end index
    pos_arr = np.empty(n, dtype=np.intp)
    prefix_arr = np.zeros(n + 1)
    cdef Py_ssize_t[::1] pos = pos_arr
    cdef double[::1] prefix = prefix_arr
    cdef double scale = M_PI / (2.0 * K)
    c = 0
    for t in range(n):
        if t >= 1 and isfinite(absr[t]) and isfinite(absr[t - 1]):
            prod = absr[t] * absr[t - 1]
            pos[c] = t
            prefix[c + 1] = prefix[c] + prod
            c += 1
        if c >= K:
            first = pos[c - K]
            if t - first + 1 <= max_lookback:
                out[t] = sqrt(scale * (prefix[c] - prefix[c - K]))
    return out_arr


def ema_carry(double[::1] x, unsigned char[::1] update, unsigned char[::1] reset,
              double kappa, double init):
    """EMA that carries its state on minutes with ``update == 0`` or non-finite input."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t t
    cdef double state = init
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for t in range(n):
        if reset[t]:
            state = init
        if update[t] and isfinite(x[t]):
            state = kappa * x[t] + (1.0 - kappa) * state
        out[t] = state
    return out_arr


cdef double _intensity(double s, double[::1] ev, Py_ssize_t m, double lam0,
                       double amp, double tau0, double expo):
    cdef double lam = lam0
    cdef Py_ssize_t i
    for i in range(m):
        lam += amp * pow(s - ev[i] + tau0, -expo)
    return lam


def hawkes_thinning(double lam0, double n, double theta, double tau0, double horizon,
                    double[::1] shock_times, double[::1] shock_events, rng):
    """Ogata thinning for a power-law kernel Hawkes process on [0, horizon).

    ``shock_events`` holds the already-jittered event times of every injected batch,
    grouped per shock in ``shock_times`` order; a batch is inserted when the clock
    crosses its shock time.
    """
    cdef double amp = n * theta * pow(tau0, theta)
    cdef double expo = 1.0 + theta
    cdef Py_ssize_t cap = 1024, m = 0, k = 0, nb = shock_times.shape[0], j = 0
    cdef Py_ssize_t ui = BATCH
    cdef double t = 0.0, bound, s, lam, u1, u2, tsh
    ev_arr = np.empty(cap)
    cdef double[::1] ev = ev_arr
    cdef double[::1] buf = np.empty(BATCH)
    cdef Py_ssize_t n_shock_events = shock_events.shape[0]

    while True:
        bound = _intensity(t, ev, m, lam0, amp, tau0, expo)
        if ui >= BATCH - 1:
            buf = rng.random(BATCH)
            ui = 0
        u1 = buf[ui]
        u2 = buf[ui + 1]
        ui += 2
        if bound <= 0.0:
            s = horizon
        else:
            s = t - log(1.0 - u1) / bound
        if j < nb and shock_times[j] <= s and shock_times[j] < horizon:
            tsh = shock_times[j]
            while k < n_shock_events and shock_events[k] < tsh + 1.0e-5:
                if m >= cap:
                    cap *= 2
                    ev_arr = np.resize(ev_arr, cap)
                    ev = ev_arr
                ev[m] = shock_events[k]
                m += 1
                k += 1
            j += 1
            t = tsh + 1.0e-5
            continue
        if s >= horizon:
            break
        lam = _intensity(s, ev, m, lam0, amp, tau0, expo)
        if lam > bound * (1.0 + 1.0e-9):
            raise RuntimeError("thinning bound violated: intensity exceeds proposal bound")
        if u2 * bound <= lam:
            if m >= cap:
                cap *= 2
                ev_arr = np.resize(ev_arr, cap)
                ev = ev_arr
            ev[m] = s
            m += 1
        t = s
    return np.sort(ev_arr[:m])
