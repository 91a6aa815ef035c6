"""Near-critical Hawkes processes with a power-law memory kernel.

The intensity is ``lambda(t) = lambda0 + sum_i phi(t - t_i)`` with
``phi(tau) = n theta tau0^theta / (tau + tau0)^(1 + theta)``, which integrates
to the branching ratio ``n``. Offspring lags are Lomax distributed, so the
process can be sampled exactly as a branching cascade, one generation at a
time. Ogata thinning is available as an independent exact sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data_model import SESSION_MINUTES, LobSnapshots, NewsItem, session_timestamps
from .errors import ConfigError

SHOCK_JITTER = 1e-6  # spread of a shock batch, well below one minute
_CHUNK = 200_000  # immigrants per cascade chunk during burn-in


@dataclass
class HawkesParams:
    theta: float = 0.3
    n: float = 0.98
    lambda0: float = 0.05
    tau0: float = 1.0
    horizon: float = 390_000.0
    seed: int | None = None
    burn_in: float = 0.0

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if not 0 <= self.n < 1:
            raise ConfigError("branching ratio must lie in [0, 1)")
        if self.lambda0 < 0 or self.tau0 <= 0 or self.horizon <= 0 or self.burn_in < 0:
            raise ConfigError("lambda0 >= 0, tau0 > 0, horizon > 0 and burn_in >= 0 required")

    @property
    def mean_rate(self) -> float:
        return self.lambda0 / (1.0 - self.n)

    def kernel(self, tau):
        return kernel(tau, self.n, self.theta, self.tau0)


@dataclass
class EventTrain:
    times: np.ndarray
    horizon: float
    shock_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shock_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def counts(self, bin_width: float = 1.0) -> np.ndarray:
        nb = int(np.ceil(self.horizon / bin_width))
        idx = np.floor(self.times / bin_width).astype(np.int64)
        return np.bincount(idx[(idx >= 0) & (idx < nb)], minlength=nb)


def kernel(tau, n=0.98, theta=0.3, tau0=1.0):
    tau = np.asarray(tau, dtype=float)
    return np.where(tau >= 0, n * theta * tau0**theta / (tau + tau0) ** (1.0 + theta), 0.0)


def offspring_lags(rng, size, theta, tau0) -> np.ndarray:
    """Lags with density ``phi / n``: Lomax(theta) scaled by ``tau0``."""
    u = 1.0 - rng.random(size)  # in (0, 1]
    return tau0 * (u ** (-1.0 / theta) - 1.0)


def cascade(parents, params: HawkesParams, rng, horizon=None) -> np.ndarray:
    """All descendants (not the parents) of ``parents`` that occur before ``horizon``."""
    horizon = params.horizon if horizon is None else horizon
    out = []
    gen = np.asarray(parents, dtype=float)
    while gen.size:
        k = rng.poisson(params.n, gen.size)
        par = np.repeat(gen, k)
        child = par + offspring_lags(rng, par.size, params.theta, params.tau0)
        gen = child[child < horizon]
        out.append(gen)
    return np.concatenate(out) if out else np.zeros(0)


def shock_batch(t0: float, size: int, rng) -> np.ndarray:
    return t0 + np.sort(rng.random(int(size))) * SHOCK_JITTER


def _branching(params: HawkesParams, rng, batches) -> np.ndarray:
    H = params.horizon
    pieces = []
    t0 = -params.burn_in
    n_imm = rng.poisson(params.lambda0 * (H - t0))
    # immigrants are placed in time order and cascaded in bounded chunks
    imm = np.sort(rng.uniform(t0, H, n_imm))
    for a in range(0, imm.size, _CHUNK):
        chunk = imm[a:a + _CHUNK]
        ev = np.concatenate([chunk, cascade(chunk, params, rng)])
        pieces.append(ev[ev >= 0])
    for b in batches:
        pieces.append(np.concatenate([b, cascade(b, params, rng)]))
    times = np.concatenate(pieces) if pieces else np.zeros(0)
    times = times[(times >= 0) & (times < H)]
    times.sort()
    return times


def simulate(params: HawkesParams, method: str = "branching", shocks=(), rng=None) -> EventTrain:
    """Sample an event train on ``[0, horizon)``.

    ``shocks`` is a sequence of ``(t0, S0)``; each adds a Poisson(S0) batch of
    exogenous events at ``t0`` whose descendants cascade through the kernel.
    The branching sampler honours ``burn_in`` by starting the baseline that
    many minutes before 0; the thinning sampler starts from an empty history.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    shocks = sorted((float(t), float(s)) for t, s in shocks)
    for t, s in shocks:
        if not 0 <= t < params.horizon:
            raise ConfigError("shock time outside the horizon")
    sizes = np.array([rng.poisson(s) if s > 0 else 0 for _, s in shocks], dtype=int)
    batches = [shock_batch(t, k, rng) for (t, _), k in zip(shocks, sizes)]
    if method == "branching":
        times = _branching(params, rng, batches)
    elif method == "thinning":
        ev = np.concatenate(batches) if batches else np.zeros(0)
        st = np.array([t for t, _ in shocks], dtype=float)
        times = kernels.hawkes_thinning(params.lambda0, params.n, params.theta, params.tau0,
                                        params.horizon, st, np.ascontiguousarray(ev, dtype=float),
                                        rng)
        times = np.asarray(times, dtype=float)
    else:
        raise ConfigError(f"unknown simulation method {method!r}")
    return EventTrain(times, params.horizon, np.array([t for t, _ in shocks], dtype=float), sizes)


def inject_exogenous_shock(train: EventTrain, params: HawkesParams, t0: float, S0: float,
                           rng=None) -> EventTrain:
    """Superpose a shock batch at ``t0`` and its cascade onto ``train``.

    Exact for the linear process: descendants of the extra events are
    independent of the existing train. ``S0 <= 0`` returns the train unchanged.
    """
    if S0 <= 0:
        return train
    if not 0 <= t0 < train.horizon:
        raise ConfigError("shock time outside the horizon")
    rng = np.random.default_rng() if rng is None else rng
    k = int(rng.poisson(S0))
    b = shock_batch(t0, k, rng)
    extra = np.concatenate([b, cascade(b, params, rng, train.horizon)])
    extra = extra[extra < train.horizon]
    times = np.sort(np.concatenate([train.times, extra]))
    order = np.argsort(np.r_[train.shock_times, t0], kind="stable")
    return EventTrain(times, train.horizon, np.r_[train.shock_times, t0][order],
                      np.r_[train.shock_sizes, k][order].astype(int))


# --- profiles ----------------------------------------------------------------

@dataclass
class RateProfile:
    offsets: np.ndarray
    mean: np.ndarray
    baseline: float
    n_windows: int


def loglog_slope(offsets, profile, baseline: float = 0.0, lo: float = 2, hi: float = 60) -> float:
    """OLS slope of ``log(profile - baseline)`` on ``log|offset|`` for ``lo <= |offset| <= hi``.

    Points with non-positive excess are left out.
    """
    k = np.abs(np.asarray(offsets, dtype=float))
    ex = np.asarray(profile, dtype=float) - baseline
    sel = (k >= lo) & (k <= hi) & (ex > 0)
    if sel.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(k[sel]), np.log(ex[sel]), 1)[0])


def _burst_bins(counts, q, sep):
    thr = np.quantile(counts, q)
    cand = np.flatnonzero(counts > thr)
    keep = []
    for i in cand:
        a, b = max(i - sep, 0), min(i + sep + 1, counts.size)
        seg = counts[a:b]
        if np.argmax(seg) == i - a:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def conditional_endogenous_profiles(trains, bin_width: float = 1.0, burst_quantile: float = 0.999,
                                    half_window: int = 60, separation: int = 60,
                                    exclude: float = 0.0) -> RateProfile:
    """Mean binned rate around bursts, with the long-run mean rate as baseline.

    A burst is a bin whose count exceeds the ``burst_quantile`` of the train's
    bin counts and is the first maximum within ``separation`` bins on either
    side. Windows that would reach a shock time (widened by ``exclude`` bins)
    or the train edges are skipped.
    """
    W = half_window
    offs = np.arange(-W, W + 1)
    rows, means = [], []
    for tr in trains:
        c = tr.counts(bin_width).astype(float)
        means.append(c.mean() if c.size else np.nan)
        shock_bins = np.floor(np.asarray(tr.shock_times) / bin_width).astype(np.int64)
        for i in _burst_bins(c, burst_quantile, separation):
            if i - W < 0 or i + W + 1 > c.size:
                continue
            if shock_bins.size and np.any(np.abs(shock_bins - i) <= W + exclude):
                continue
            rows.append(c[i - W:i + W + 1])
    if not rows:
        return RateProfile(offs, np.full(offs.size, np.nan), float(np.nanmean(means)) if means else np.nan, 0)
    return RateProfile(offs, np.mean(rows, axis=0), float(np.nanmean(means)), len(rows))


def shock_response_profile(trains, bin_width: float = 1.0, half_window: int = 60) -> RateProfile:
    """Mean binned rate around every shock; baseline from the pre-shock bins."""
    W = half_window
    offs = np.arange(-W, W + 1)
    rows = []
    for tr in trains:
        c = tr.counts(bin_width).astype(float)
        for t0 in tr.shock_times:
            i = int(np.floor(t0 / bin_width))
            if i - W < 0 or i + W + 1 > c.size:
                continue
            rows.append(c[i - W:i + W + 1])
    if not rows:
        return RateProfile(offs, np.full(offs.size, np.nan), np.nan, 0)
    m = np.mean(rows, axis=0)
    return RateProfile(offs, m, float(m[:W].mean()), len(rows))


def profile_slopes(profile: RateProfile, lo: float = 2, hi: float = 60) -> tuple[float, float]:
    """(pre, post) log-log slopes of the excess rate."""
    o = profile.offsets
    pre = loglog_slope(o[o < 0], profile.mean[o < 0], profile.baseline, lo, hi)
    post = loglog_slope(o[o > 0], profile.mean[o > 0], profile.baseline, lo, hi)
    return pre, post


# --- synthetic market panel ----------------------------------------------------

@dataclass
class PanelConfig:
    n_stocks: int = 300
    n_sessions: int = 60
    start_date: str = "2024-01-02"
    shocks_per_session: float = 0.1
    shock_size: float = 150.0
    sigma0: float = 5e-4  # per-minute return scale at the mean event rate
    nu: float = 2.5  # activity offset in the volatility map
    vol_exponent: float = 1.0  # 0.5 makes return variance proportional to activity
    price0: float = 1000.0
    tick: float = 0.01
    depth_ticks: int = 3  # mean extra gap to the second level
    seasonality: float = 0.0  # amplitude of a U-shaped intraday volatility factor
    noise: float | None = None  # log-normal magnitude dispersion; None = Gaussian returns
    burn_in: float = 100_000.0
    news_noise_per_session: float = 0.0


@dataclass
class SyntheticPanel:
    books: dict
    news: list
    dates: np.ndarray
    trains: dict
    shocks: dict  # stock -> shock timestamps (datetime64[m])
    returns: dict = field(repr=False, default_factory=dict)


def u_shape(amplitude: float, m: int = SESSION_MINUTES) -> np.ndarray:
    """Intraday factor with a high open, a trough at midday and a high close; mean square 1."""
    x = np.linspace(-1.0, 1.0, m)
    f = 1.0 + amplitude * x**2
    return f / np.sqrt(np.mean(f**2))


def business_dates(start: str, count: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(count), roll="forward")


def counts_to_returns(counts, nu, mean_rate, sigma0, rng, season=None, noise=None,
                      exponent: float = 1.0) -> np.ndarray:
    """Returns whose scale follows the local event rate: ``sigma0 ((nu + N) / (nu + mu))^g z``.

    ``z`` is standard normal, or with ``noise`` set a random sign times
    ``exp(noise * e - noise^2)`` (unit mean square) for a tunable dispersion.
    """
    c = np.asarray(counts, dtype=float)
    scale = sigma0 * ((nu + c) / (nu + mean_rate)) ** exponent
    if season is not None:
        scale = scale * season[None, :]
    if noise is None:
        z = rng.standard_normal(c.shape)
    else:
        sign = np.where(rng.random(c.shape) < 0.5, -1.0, 1.0)
        z = sign * np.exp(noise * rng.standard_normal(c.shape) - noise**2)
    return scale * z


def returns_to_book(stock, dates, r, cfg: PanelConfig, rng) -> LobSnapshots:
    """Two-level book whose mid reproduces the log-returns up to tick rounding."""
    n, m = r.shape
    p0 = cfg.price0 / cfg.tick
    logm = np.log(p0) + np.cumsum(r.ravel())
    bid = np.floor(np.exp(logm)).reshape(n, m)
    ask = bid + 1.0
    g_b = rng.geometric(1.0 / cfg.depth_ticks, size=(n, m)).astype(float)
    g_a = rng.geometric(1.0 / cfg.depth_ticks, size=(n, m)).astype(float)
    vols = rng.integers(1, 2000, size=(4, n, m)).astype(float)
    ts = session_timestamps(dates).ravel()
    return LobSnapshots(stock, ts, bid.ravel(), vols[0].ravel(), (bid - g_b).ravel(),
                        vols[1].ravel(), ask.ravel(), vols[2].ravel(), (ask + g_a).ravel(),
                        vols[3].ravel(), cfg.tick)


def to_volatility_panel(trains: dict, dates, cfg: PanelConfig, rng, mean_rate: float) -> SyntheticPanel:
    """Turn per-stock event trains into minute books and a news file.

    Train time is measured in trading minutes: minute ``k`` is slot
    ``k % 390`` of session ``k // 390``. Every injected shock yields one
    title-matched news item at its minute.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    n = dates.size
    H = n * SESSION_MINUTES
    season = u_shape(cfg.seasonality) if cfg.seasonality else None
    stamps = session_timestamps(dates).ravel()
    books, news, shocks, rets = {}, [], {}, {}
    for stock in sorted(trains):
        tr = trains[stock]
        c = tr.counts(1.0)[:H]
        c = np.pad(c, (0, H - c.size)).reshape(n, SESSION_MINUTES)
        r = counts_to_returns(c, cfg.nu, mean_rate, cfg.sigma0, rng, season, cfg.noise,
                              cfg.vol_exponent)
        books[stock] = returns_to_book(stock, dates, r, cfg, rng)
        rets[stock] = r
        k = np.floor(tr.shock_times).astype(np.int64)
        k = k[(k >= 0) & (k < H)]
        shocks[stock] = stamps[k]
        news.extend(NewsItem(t, frozenset({stock}), True) for t in stamps[k])
    if cfg.news_noise_per_session > 0:
        names = sorted(trains)
        m = rng.poisson(cfg.news_noise_per_session * n * len(names))
        pick = rng.integers(0, len(names), m)
        at = rng.integers(0, H, m)
        news.extend(NewsItem(stamps[a], frozenset({names[p]}), True) for p, a in zip(pick, at))
    news.sort(key=lambda it: (it.timestamp, sorted(it.tickers)))
    return SyntheticPanel(books, news, dates, trains, shocks, rets)


def simulate_panel(params: HawkesParams, cfg: PanelConfig, seed=None) -> SyntheticPanel:
    """Independent Hawkes trains per stock with randomly placed exogenous shocks.

    Shocks land at uniformly drawn trading minutes away from the first and last
    30 minutes of a session; each stock gets its own child seed.
    """
    ss = np.random.SeedSequence(params.seed if seed is None else seed)
    children = ss.spawn(cfg.n_stocks + 1)
    dates = business_dates(cfg.start_date, cfg.n_sessions)
    H = float(cfg.n_sessions * SESSION_MINUTES)
    p = HawkesParams(params.theta, params.n, params.lambda0, params.tau0, H, None, cfg.burn_in)
    trains = {}
    width = len(str(cfg.n_stocks - 1))
    for i in range(cfg.n_stocks):
        rng = np.random.default_rng(children[i])
        k = rng.poisson(cfg.shocks_per_session * cfg.n_sessions)
        sess = rng.integers(0, cfg.n_sessions, k)
        slot = rng.integers(30, SESSION_MINUTES - 30, k)
        t0 = sess * SESSION_MINUTES + slot + rng.random(k) * 0.5
        trains[f"S{i:0{width}d}"] = simulate(p, "branching", [(t, cfg.shock_size) for t in t0], rng)
    rng = np.random.default_rng(children[-1])
    return to_volatility_panel(trains, dates, cfg, rng, p.mean_rate)
