"""Per-minute observables around jumps and their aggregate profiles.

Observables: ``|J|``, the excess-volatility average ``Sigma``, the trend
average ``T``, the binarised trend average ``B`` and the sparsity z-score
``S``. Windows of fixed width are cut around cluster starts and averaged per
class with bootstrap bands and Welch tests against a pre-event baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from . import kernels
from .data_model import SESSION_MINUTES, SessionGrid, split_timestamps
from .errors import ConfigError

OBSERVABLES = ("abs_J", "Sigma", "T", "B", "S")
#: observables averaged as absolute values
ABSOLUTE = ("T", "B")


@dataclass
class ObservableSeries:
    stock: str
    dates: np.ndarray
    abs_J: np.ndarray
    Sigma: np.ndarray
    T: np.ndarray
    B: np.ndarray
    S: np.ndarray
    s: np.ndarray  # raw sparsity
    kappa: float = 0.12
    burn_in: int = 30

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class SparsityModel:
    s: np.ndarray
    sigma: np.ndarray
    f: np.ndarray  # (390,) slot factors
    mu: np.ndarray
    S: np.ndarray


@dataclass
class ProfilePanel:
    offsets: np.ndarray
    data: dict  # observable name -> (n_clusters, W)
    labels: np.ndarray
    cluster_ids: np.ndarray

    def select(self, label) -> "ProfilePanel":
        m = self.labels == label
        return ProfilePanel(self.offsets, {k: v[m] for k, v in self.data.items()},
                            self.labels[m], self.cluster_ids[m])

    def __len__(self):
        return self.labels.size


@dataclass
class AggregateProfile:
    offsets: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n: np.ndarray
    p: np.ndarray
    p_adj: np.ndarray
    significant: np.ndarray
    tested: np.ndarray


def ema(x, kappa: float, update=None, reset=None, init: float = 0.0) -> np.ndarray:
    """``e_t = kappa x_t + (1 - kappa) e_{t-1}``, carried unchanged where not updated.

    A minute is skipped (value carried) when ``update`` is False or ``x_t`` is
    MISSING; ``reset`` restarts the average at ``init``.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=float).ravel())
    upd = np.ones(x.size, np.uint8) if update is None else np.ascontiguousarray(
        np.asarray(update).ravel(), dtype=np.uint8)
    rst = np.zeros(x.size, np.uint8) if reset is None else np.ascontiguousarray(
        np.asarray(reset).ravel(), dtype=np.uint8)
    return kernels.ema_carry(x, upd, rst, float(kappa), float(init))


def raw_sparsity(grid: SessionGrid) -> np.ndarray:
    """Volume-discounted gap across the thinner side of the book, in ticks.

    MISSING when any of the four prices or the two best volumes is missing, or
    a best volume is not positive.
    """
    a1, a2, b1, b2 = grid["ask1"], grid["ask2"], grid["bid1"], grid["bid2"]
    vb, va = grid["bidv1"], grid["askv1"]
    with np.errstate(invalid="ignore", divide="ignore"):
        bad = ~(np.isfinite(a1) & np.isfinite(a2) & np.isfinite(b1) & np.isfinite(b2))
        bad |= ~(vb > 0) | ~(va > 0)
        left = (a1 - b2) / (1.0 + np.log(np.where(vb > 0, vb, 1.0)))
        right = (a2 - b1) / (1.0 + np.log(np.where(va > 0, va, 1.0)))
        s = np.maximum(left, right)
    s[bad] = np.nan
    return s


def sparsity_zscore(s, K: int = SESSION_MINUTES, min_periods: int = 30) -> SparsityModel:
    """Z-score of sparsity: ``s / (f sigma) - mu``.

    ``sigma`` is the trailing standard deviation over ``K`` minutes, ``f`` the
    per-slot mean of ``s / sigma`` and ``mu`` the trailing mean of
    ``s / (f sigma)``.
    """
    s = np.asarray(s, dtype=float)
    shape = s.shape
    flat = pd.Series(s.ravel())
    sd = flat.rolling(K, min_periods=min_periods).std().to_numpy().reshape(shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(sd > 0, s / sd, np.nan)
    cnt = np.isfinite(ratio).sum(axis=0)
    f = np.where(cnt > 0, np.nansum(np.nan_to_num(ratio, nan=0.0), axis=0) / np.maximum(cnt, 1), np.nan)
    f = np.where(np.isfinite(f) & (f > 0), f, np.nan)
    z = ratio / f[None, :]
    mu = pd.Series(z.ravel()).rolling(K, min_periods=min_periods).mean().to_numpy().reshape(shape)
    return SparsityModel(s, sd, f, mu, z - mu)


def build_observables(scores, jumps, grid: SessionGrid | None = None, kappa: float = 0.12,
                      burn_in: int = 30, K: int = SESSION_MINUTES,
                      sparsity: np.ndarray | None = None) -> ObservableSeries:
    """Observables on the session grid of ``scores``.

    ``jumps`` is a boolean ``(n_sessions, 390)`` mask of jump minutes; these do
    not update ``Sigma`` and ``T``. The three averages restart at 0 every
    session open and stay MISSING during the first ``burn_in`` minutes.
    ``grid`` supplies the book for the sparsity score and must cover the same
    sessions; without it ``S`` is MISSING.
    """
    if not 0 < kappa <= 1:
        raise ConfigError("kappa must lie in (0, 1]")
    J = np.asarray(scores.J, dtype=float)
    shape = J.shape
    jumps = np.asarray(jumps, dtype=bool)
    reset = np.zeros(shape, dtype=bool)
    reset[:, 0] = True
    keep = ~jumps
    Sigma = ema(np.abs(J), kappa, keep, reset).reshape(shape)
    T = ema(J, kappa, keep, reset).reshape(shape)
    B = ema(np.sign(J), kappa, None, reset).reshape(shape)
    for a in (Sigma, T, B):
        a[:, :burn_in] = np.nan
    if grid is not None:
        if grid.dates.shape != np.asarray(scores.dates).shape or np.any(grid.dates != scores.dates):
            grid = _align_grid(grid, scores.dates)
        s = raw_sparsity(grid)
        S = sparsity_zscore(s, K).S
    elif sparsity is not None:
        s = np.asarray(sparsity, dtype=float)
        if s.shape != shape:
            raise ValueError("sparsity must match the score grid")
        S = sparsity_zscore(s, K).S
    else:
        s = np.full(shape, np.nan)
        S = np.full(shape, np.nan)
    return ObservableSeries(scores.stock, np.asarray(scores.dates), np.abs(J), Sigma, T, B, S, s,
                            kappa, burn_in)


def _align_grid(grid: SessionGrid, dates) -> SessionGrid:
    dates = np.asarray(dates, dtype="datetime64[D]")
    pos = np.searchsorted(grid.dates, dates)
    pos = np.clip(pos, 0, max(grid.dates.size - 1, 0))
    found = grid.dates[pos] == dates
    cols = {}
    for k, v in grid.cols.items():
        out = np.full((dates.size, SESSION_MINUTES), np.nan)
        out[found] = v[pos[found]]
        cols[k] = out
    return SessionGrid(grid.stock, dates, cols, grid.tick)


def window_offsets(W: int = 160) -> np.ndarray:
    return np.arange(-(W // 2), W - W // 2)


def extract_window(obs: ObservableSeries, t_first, W: int = 160, names=OBSERVABLES) -> dict:
    """Values at offsets ``-W/2 .. W/2 - 1`` around ``t_first`` (offset 0).

    Offsets outside the session are MISSING. ``T`` and ``B`` are returned as
    absolute values.
    """
    day, slot = split_timestamps(np.array([t_first], dtype="datetime64[m]"))
    row = np.searchsorted(obs.dates, day[0])
    offs = window_offsets(W)
    out = {name: np.full(W, np.nan) for name in names}
    if row >= len(obs.dates) or obs.dates[row] != day[0]:
        return out
    cols = slot[0] + offs
    inside = (cols >= 0) & (cols < SESSION_MINUTES)
    for name in names:
        vals = obs.get(name)[row, cols[inside]]
        out[name][inside] = np.abs(vals) if name in ABSOLUTE else vals
    return out


def build_panel(obs_by_stock: dict, clusters, W: int = 160, names=OBSERVABLES) -> ProfilePanel:
    """Stack windows for every kept cluster whose stock has observables."""
    rows = {name: [] for name in names}
    labels, ids = [], []
    for c in clusters:
        if not c.kept or c.stock not in obs_by_stock:
            continue
        win = extract_window(obs_by_stock[c.stock], c.t_first, W, names)
        for name in names:
            rows[name].append(win[name])
        labels.append(c.label)
        ids.append(c.cluster_id)
    data = {name: (np.vstack(v) if v else np.zeros((0, W))) for name, v in rows.items()}
    return ProfilePanel(window_offsets(W), data, np.array(labels, dtype=object),
                        np.array(ids, dtype=int))


def bootstrap_mean_bands(values, n_boot: int = 1000, band: float = 0.01, rng=None):
    """Percentile bands of the per-column mean from resampling rows."""
    x = np.asarray(values, dtype=float)
    rng = np.random.default_rng() if rng is None else rng
    n = x.shape[0]
    finite = np.isfinite(x)
    xz = np.where(finite, x, 0.0)
    w = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (w @ xz) / (w @ finite.astype(float))
    lo, hi = np.full(x.shape[1], np.nan), np.full(x.shape[1], np.nan)
    cols = finite.any(axis=0)  # columns without data keep NaN bands
    if n_boot and cols.any():
        lo[cols] = np.nanquantile(means[:, cols], band / 2, axis=0)
        hi[cols] = np.nanquantile(means[:, cols], 1 - band / 2, axis=0)
    return lo, hi


def aggregate(values, offsets=None, n_boot: int = 1000, band: float = 0.01, baseline: int = 20,
              fdr: float = 0.01, rng=None) -> AggregateProfile:
    """Mean profile with bootstrap bands and BH-corrected Welch tests.

    Each offset's cross-cluster values are tested against the pooled values
    of the first ``baseline`` offsets. Offsets with fewer than two values are
    left untested (p = NaN, not significant).
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 2:
        raise ValueError("values must be (n_clusters, W)")
    if x.shape[0] < 2:
        raise ValueError("need at least two clusters to aggregate")
    W = x.shape[1]
    offsets = window_offsets(W) if offsets is None else np.asarray(offsets)
    finite = np.isfinite(x)
    n = finite.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, np.where(finite, x, 0.0).sum(axis=0) / np.maximum(n, 1), np.nan)
    lo, hi = bootstrap_mean_bands(x, n_boot, band, rng)
    # percentile bands need not contain the sample mean exactly; widen to it
    lo, hi = np.fmin(lo, mean), np.fmax(hi, mean)
    pool = x[:, :baseline][finite[:, :baseline]]
    p = np.full(W, np.nan)
    tested = (n >= 2) & (pool.size >= 2)
    for j in np.flatnonzero(tested):
        col = x[finite[:, j], j]
        if np.ptp(col) == 0 and np.ptp(pool) == 0:
            # degenerate: no spread on either side
            p[j] = 1.0 if col[0] == pool[0] else 0.0
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            res = stats.ttest_ind(col, pool, equal_var=False)
        p[j] = res.pvalue if np.isfinite(res.pvalue) else 1.0
    p_adj = np.full(W, np.nan)
    if tested.any():
        p_adj[tested] = stats.false_discovery_control(p[tested], method="bh")
    significant = tested & (np.nan_to_num(p_adj, nan=1.0) < fdr)
    return AggregateProfile(offsets, mean, lo, hi, n, p, p_adj, significant, tested)
