"""Double power-law fits of volatility profiles around a shock.

The model is ``f(t) = N_l |t - t_c|^-p_l`` for ``t < t_c`` and
``N_r |t - t_c|^-p_r`` for ``t > t_c``, plus a baseline ``d`` in the direct
fit. The shock time ``t_c`` is confined to ``(t_j - 1, t_j)`` where ``t_j`` is
the minute of the first jump.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .errors import ConfigError

log = logging.getLogger(__name__)

TC_SEEDS = (0.1, 0.3, 0.5, 0.7, 0.9)  # fraction of the way from t_j - 1 to t_j
SW_ALPHA = 0.01
MAX_ITER = 500
RANK_RTOL = 1e-12  # relative eigenvalue floor of the scaled curvature
AMP_RTOL = 1e-8  # amplitudes below this fraction of the mean level count as zero


@dataclass
class DoublePowerLawFit:
    N_l: float
    N_r: float
    p_l: float
    p_r: float
    d: float
    t_c: float
    se: dict
    sw_p: float
    method: str
    converged: bool = True
    message: str = ""
    rss: float = float("nan")
    n: int = 0
    t_j: float = 0.0

    @property
    def non_normal(self) -> bool:
        return not (self.sw_p >= SW_ALPHA)

    def coefficients(self) -> dict:
        out = {"N_l": self.N_l, "N_r": self.N_r, "p_l": self.p_l, "p_r": self.p_r}
        if self.method == "direct":
            out["d"] = self.d
        return out

    def curve(self, t) -> np.ndarray:
        return model(t, self.N_l, self.N_r, self.p_l, self.p_r, self.d, self.t_c)


@dataclass
class Asymmetry:
    A: float
    A_l: float
    A_r: float


@dataclass
class ClosedFormSide:
    A: float
    p: float
    rss: float
    se_A: float = float("nan")
    se_p: float = float("nan")


def _split(t, t_c):
    t = np.asarray(t, dtype=float)
    left = t < t_c
    return t, left, np.abs(t - t_c)


def model(t, N_l, N_r, p_l, p_r, d, t_c) -> np.ndarray:
    t, left, dt = _split(t, t_c)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(left, N_l * dt**-p_l, N_r * dt**-p_r) + d


# --- direct fit -------------------------------------------------------------

def _expit(u):
    return 0.5 * (1.0 + math.tanh(0.5 * u))


def _logit(x):
    return math.log(x / (1.0 - x))


def _unpack(z, t_j):
    N_l, N_r, p_l, p_r, v, u = z
    s = _expit(u)
    return N_l, N_r, p_l, p_r, math.exp(v), t_j - 1.0 + s, s


def _jac_natural(t, N_l, N_r, p_l, p_r, t_c):
    """d f / d (N_l, N_r, p_l, p_r, d, t_c) at each t."""
    t, left, dt = _split(t, t_c)
    ldt = np.log(dt)
    with np.errstate(over="ignore"):
        pw_l = np.where(left, dt**-p_l, 0.0)
        pw_r = np.where(left, 0.0, dt**-p_r)
    J = np.empty((t.size, 6))
    J[:, 0] = pw_l
    J[:, 1] = pw_r
    J[:, 2] = -N_l * pw_l * ldt
    J[:, 3] = -N_r * pw_r * ldt
    J[:, 4] = 1.0
    J[:, 5] = np.where(left, -p_l * N_l * pw_l / dt, p_r * N_r * pw_r / dt)
    return J


def _prepare(values, offsets, t_j, drop_first):
    y = np.asarray(values, dtype=float)
    t = np.arange(y.size, dtype=float) - y.size // 2 if offsets is None else np.asarray(offsets, float)
    if t.shape != y.shape:
        raise ValueError("offsets and values differ in length")
    keep = np.isfinite(y)
    if drop_first:
        keep &= t != t_j
    return t[keep], y[keep]


def fit_direct(values, offsets=None, t_j: float = 0.0, drop_first: bool = True,
               max_iter: int = MAX_ITER) -> DoublePowerLawFit:
    """Least-squares fit of the running sum of the model to the running sum of ``values``.

    Levenberg-Marquardt on transformed parameters: a logistic map keeps ``t_c``
    inside ``(t_j - 1, t_j)`` and an exponential keeps ``d > 0``. Five starts
    spread over the ``t_c`` interval; the smallest residual wins. Values are
    rescaled by their mean before fitting so amplitudes scale exactly with the
    data. Standard errors come from the Gauss-Newton curvature at the optimum.
    """
    t, y = _prepare(values, offsets, t_j, drop_first)
    if y.size < 7:
        raise ValueError("need at least 7 valid points for a 6-parameter fit")
    scale = float(np.mean(np.abs(y)))
    if not scale > 0:
        scale = 1.0
    ys = y / scale
    D = np.cumsum(ys)

    def resid(z):
        N_l, N_r, p_l, p_r, d, t_c, _ = _unpack(z, t_j)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.cumsum(model(t, N_l, N_r, p_l, p_r, d, t_c)) - D

    def jac(z):
        N_l, N_r, p_l, p_r, d, t_c, s = _unpack(z, t_j)
        Jn = _jac_natural(t, N_l, N_r, p_l, p_r, t_c)
        Jn[:, 4] *= d
        Jn[:, 5] *= s * (1.0 - s)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.cumsum(Jn, axis=0)

    base = float(np.median(ys))
    d0 = max(base, 1e-3)
    near_l = ys[t < t_j][-3:] if np.any(t < t_j) else np.array([d0])
    near_r = ys[t > t_j][:3] if np.any(t > t_j) else np.array([d0])
    best = None
    for frac in TC_SEEDS:
        z0 = np.array([max(np.mean(near_l) - d0, 1e-2), max(np.mean(near_r) - d0, 1e-2),
                       0.5, 0.5, math.log(d0), _logit(frac)])
        try:
            res = optimize.least_squares(resid, z0, jac=jac, method="lm", max_nfev=max_iter,
                                         xtol=1e-15, ftol=1e-15, gtol=1e-15)
        except (ValueError, FloatingPointError) as exc:  # pragma: no cover - defensive
            log.debug("direct fit start %.1f failed: %s", frac, exc)
            continue
        if not np.all(np.isfinite(res.fun)):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        nan = float("nan")
        return DoublePowerLawFit(nan, nan, nan, nan, nan, nan, {}, nan, "direct", False,
                                 "no start produced a finite fit", nan, int(y.size), t_j)
    best.x, best.cost = _polish(resid, jac, best.x, best.cost)
    N_l, N_r, p_l, p_r, d, t_c, _ = _unpack(best.x, t_j)
    # the LM driver reports status 0 when the evaluation budget ran out
    converged = best.status > 0
    message = best.message
    if max(abs(N_l), abs(N_r)) <= AMP_RTOL:
        # both power-law terms vanish: a flat profile leaves the exponents undefined
        converged = False
        message = "degenerate: both amplitudes vanish"
    rss = float(2.0 * best.cost) * scale**2
    Jc = np.cumsum(_jac_natural(t, N_l, N_r, p_l, p_r, t_c), axis=0)
    se_vec = _stderr(Jc, 2.0 * best.cost, y.size)
    se = dict(zip(("N_l", "N_r", "p_l", "p_r", "d", "t_c"), se_vec))
    for k in ("N_l", "N_r", "d"):
        se[k] *= scale
    fit = DoublePowerLawFit(N_l * scale, N_r * scale, p_l, p_r, d * scale, t_c, se, float("nan"),
                            "direct", converged, message, rss, int(y.size), t_j)
    fit.sw_p = shapiro_wilk(_standardise(y - fit.curve(t)), strict=False)
    if not converged:
        log.debug("direct fit rejected: %s", message)
    return fit


def _polish(resid, jac, z, cost, steps: int = 20):
    """Newton steps on the gradient ``J^T r`` past the LM stopping rule.

    LM stops on the relative cost change, which leaves ~sqrt(ftol) in ``z``;
    the gradient locates the minimum to rounding. The Hessian of the cost is
    taken by central differences of the analytic gradient. Steps are kept only
    while the gradient norm falls.
    """
    def grad(x):
        try:
            with np.errstate(all="ignore"):
                return jac(x).T @ resid(x)
        except OverflowError:
            return np.full(x.size, np.nan)

    z0 = z
    g = grad(z)
    gn = float(np.linalg.norm(g))
    for _ in range(steps):
        if not np.isfinite(gn) or gn == 0.0:
            break
        H = np.empty((z.size, z.size))
        for k in range(z.size):
            h = 1e-6 * (1.0 + abs(z[k]))
            e = np.zeros(z.size)
            e[k] = h
            H[:, k] = (grad(z + e) - grad(z - e)) / (2.0 * h)
        try:
            step = np.linalg.solve(0.5 * (H + H.T), g)
        except np.linalg.LinAlgError:
            break
        zn = z - step
        if not np.all(np.isfinite(zn)):
            break
        gnew = grad(zn)
        gnn = float(np.linalg.norm(gnew))
        if not np.isfinite(gnn) or gnn >= gn:
            break
        z, g, gn = zn, gnew, gnn
    r = resid(z)
    c = 0.5 * float(r @ r)
    # keep the LM point if the polish wandered to a worse saddle
    return (z, c) if np.isfinite(c) and c <= cost * (1.0 + 1e-9) else (z0, cost)


def _stderr(J, rss, n):
    k = J.shape[1]
    dof = max(n - k, 1)
    s2 = rss / dof
    if not np.all(np.isfinite(J)):
        return np.full(k, np.inf)
    # column scaling makes the rank decision independent of parameter units
    norms = np.sqrt((J * J).sum(axis=0))
    norms = np.where(norms > 0, norms, 1.0)
    Hs = (J / norms).T @ (J / norms)
    try:
        w, V = np.linalg.eigh(Hs)
    except np.linalg.LinAlgError:
        return np.full(k, np.inf)
    null = w <= RANK_RTOL * max(w.max(), 0.0)
    inv_w = np.where(null, 0.0, 1.0 / np.where(null, 1.0, w))
    var = ((V * inv_w) @ V.T).diagonal() * s2 / norms**2
    # parameters that load on an unidentified direction get infinite errors
    bad = (np.abs(V[:, null]) > 1e-6).any(axis=1) if null.any() else np.zeros(k, bool)
    var = np.where(bad | (var < 0), np.inf, var)
    return np.sqrt(var)


def _standardise(r):
    r = np.asarray(r, dtype=float)
    sd = r.std()
    return (r - r.mean()) / sd if sd > 0 else r - r.mean()


# --- closed-form log-space fit ---------------------------------------------

def _side_solution(l, y):
    """OLS of ``y = A - p l``; None when the normal equations are singular."""
    L = l.size
    if L < 2:
        return None
    s, S = l.sum(), (l * l).sum()
    Y, Z = y.sum(), (y * l).sum()
    det = s * s - L * S
    if abs(det) <= 1e-12 * max(1.0, L * S):
        return None
    p = (L * Z - s * Y) / det
    A = (s * Z - S * Y) / det
    r = y - (A - p * l)
    rss = float(r @ r)
    dof = L - 2
    if dof > 0:
        s2 = rss / dof
        # inverse of [[L, -s], [-s, S]] (design columns 1 and -l)
        se_A = math.sqrt(max(s2 * S / -det, 0.0))
        se_p = math.sqrt(max(s2 * L / -det, 0.0))
    else:
        se_A = se_p = float("inf")
    return ClosedFormSide(A, p, rss, se_A, se_p)


def closed_form_at(t, y, t_c):
    """Closed-form (A, p) on each side of ``t_c`` for log-profile ``y``."""
    t, left, dt = _split(t, t_c)
    l = np.log(dt)
    return _side_solution(l[left], y[left]), _side_solution(l[~left], y[~left])


def closed_form_core(t, y, t_j: float = 0.0, grid_step: float = 0.01):
    """Grid search over ``t_c`` of the per-side closed-form solutions.

    ``y`` is the log of the (normalised) profile. Returns ``(t_c, left, right)``
    or None when no grid point gives two admissible sides.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n = int(round(1.0 / grid_step))
    best = None
    for k in range(1, n):
        t_c = t_j - 1.0 + k / n
        left, right = closed_form_at(t, y, t_c)
        if left is None or right is None:
            continue
        rss = left.rss + right.rss
        if best is None or rss < best[0]:
            best = (rss, t_c, left, right)
    return None if best is None else best[1:]


def fit_closed_form(values, offsets=None, t_j: float = 0.0, grid_step: float = 0.01,
                    eps_floor: float = 1e-3, drop_first: bool = True) -> DoublePowerLawFit:
    """Log-space fit of the profile normalised by the first-jump size.

    ``log(|J| / J0)`` is regressed on ``log |t - t_c|`` separately on each side
    with the exact least-squares solution, for every ``t_c`` on a grid of step
    ``grid_step`` inside ``(t_j - 1, t_j)``. Values below ``eps_floor`` (after
    normalisation) are floored before taking logs. The returned amplitudes are
    in units of ``J0``.
    """
    if not 0 < grid_step < 1:
        raise ConfigError("grid step must lie in (0, 1)")
    v = np.abs(np.asarray(values, dtype=float))
    t_all = np.arange(v.size, dtype=float) - v.size // 2 if offsets is None else np.asarray(offsets, float)
    at_j = np.flatnonzero(t_all == t_j)
    if at_j.size == 0 or not np.isfinite(v[at_j[0]]) or v[at_j[0]] <= 0:
        raise ValueError("first-jump value missing or zero; cannot normalise")
    J0 = v[at_j[0]]
    t, y = _prepare(v / J0, t_all, t_j, drop_first)
    ly = np.log(np.maximum(y, eps_floor))
    found = closed_form_core(t, ly, t_j, grid_step)
    nan = float("nan")
    if found is None:
        return DoublePowerLawFit(nan, nan, nan, nan, 0.0, nan, {}, nan, "closed_form", False,
                                 "no admissible shock time on the grid", nan, int(y.size), t_j)
    t_c, left, right = found
    N_l, N_r = math.exp(left.A), math.exp(right.A)
    se = {"N_l": N_l * left.se_A, "N_r": N_r * right.se_A, "p_l": left.se_p, "p_r": right.se_p}
    fit = DoublePowerLawFit(N_l, N_r, left.p, right.p, 0.0, t_c, se, nan, "closed_form", True, "",
                            left.rss + right.rss, int(y.size), t_j)
    tt, lmask, dt = _split(t, t_c)
    resid = ly - np.where(lmask, left.A - left.p * np.log(dt), right.A - right.p * np.log(dt))
    fit.sw_p = shapiro_wilk(_standardise(resid), strict=False)
    return fit


# --- diagnostics -------------------------------------------------------------

def asymmetry(fit: DoublePowerLawFit, t_min: int = -80, t_max: int = 79, t_j: int = 0) -> Asymmetry:
    """Areas of the fitted curve before and after the jump minute and their contrast."""
    tl = np.arange(t_min, t_j, dtype=float)
    tr = np.arange(t_j, t_max + 1, dtype=float)
    A_l = float(fit.curve(tl).sum())
    A_r = float(fit.curve(tr).sum())
    tot = A_l + A_r
    A = (A_l - A_r) / tot if tot != 0 and np.isfinite(tot) else float("nan")
    return Asymmetry(A, A_l, A_r)


def relative_errors(fit: DoublePowerLawFit) -> np.ndarray:
    est = fit.coefficients()
    out = []
    for k, v in est.items():
        e = fit.se.get(k, float("inf"))
        if v == 0:
            out.append(0.0 if e == 0 else float("inf"))
        else:
            out.append(abs(e / v))
    return np.array(out, dtype=float)


def passes_quality(fit: DoublePowerLawFit, max_median_rel_err: float = 1.0) -> bool:
    if not fit.converged:
        return False
    rel = relative_errors(fit)
    if rel.size == 0 or np.all(np.isnan(rel)):
        return False
    return bool(np.median(np.nan_to_num(rel, nan=np.inf)) < max_median_rel_err)


def quality_filter(fits, max_median_rel_err: float = 1.0) -> list:
    """Fits whose median relative coefficient error is below the bound."""
    return [f for f in fits if passes_quality(f, max_median_rel_err)]


def shapiro_wilk(residuals, strict: bool = True) -> float:
    """Shapiro–Wilk p-value. Constant input gives NaN (flagged non-normal).

    Raises ValueError for fewer than three values unless ``strict`` is False,
    in which case NaN is returned. Samples beyond 5000 are thinned evenly.
    """
    x = np.asarray(residuals, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 3:
        if strict:
            raise ValueError("Shapiro-Wilk needs at least 3 values")
        return float("nan")
    if np.ptp(x) == 0:
        return float("nan")
    if x.size > 5000:
        x = x[np.linspace(0, x.size - 1, 5000).astype(int)]
    return float(stats.shapiro(x).pvalue)
