"""Clustering of jumps and news, exogenous/endogenous labelling and filters.

Two consecutive events of a stock on the same day join a cluster when their
inter-time is improbably short under a Bernoulli null with per-minute rate
``p``: ``dt < log(1 - eps) / log(1 - p) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError

ENDO = "ENDO"
EXO = "EXO"
DISCARDED = "DISCARDED"

P_FLOOR = 1e-9
_MINUTE = np.timedelta64(1, "m")


@dataclass
class ClusterConfig:
    eps: float = 0.05
    news_eps: float | None = None
    news_window: tuple = (-1, 4)
    market_wide_threshold: int = 30
    contamination_gap: int = 100
    mw_null: str | None = None  # None or "shuffle"
    n_shuffles: int = 1000
    mw_alpha: float = 0.05

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.mw_null not in (None, "shuffle"):
            raise ConfigError("mw_null must be None or 'shuffle'")
        lo, hi = self.news_window
        if lo > hi:
            raise ConfigError("news window start after its end")


@dataclass
class JumpCluster:
    stock: str
    times: np.ndarray  # datetime64[m], chronological
    scores: np.ndarray  # signed J of each member
    news_class: str = ENDO
    label: str = ENDO
    reason: str = "none"
    cluster_id: int = -1

    @property
    def t_first(self):
        return self.times[0]

    @property
    def t_last(self):
        return self.times[-1]

    @property
    def size(self) -> int:
        return int(self.times.size)

    @property
    def kept(self) -> bool:
        return self.label != DISCARDED

    @property
    def kendall_tau(self) -> float:
        return kendall_tau(self)


@dataclass
class NewsCluster:
    stock: str
    times: np.ndarray

    @property
    def t_first(self):
        return self.times[0]

    @property
    def t_last(self):
        return self.times[-1]


@dataclass
class MarketWideResult:
    overlaps: np.ndarray
    flags: np.ndarray
    null_quantile: np.ndarray | None = None
    null_counts: np.ndarray | None = field(default=None, repr=False)


def calibrate_p(event_counts, minutes):
    """Per stock-month Bernoulli rate ``count / minutes`` clamped into (0, 1).

    Entries with zero minutes come back as NaN (the stock-month is skipped).
    """
    counts = np.asarray(event_counts, dtype=float)
    minutes = np.asarray(minutes, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(minutes > 0, counts / np.where(minutes > 0, minutes, 1.0), np.nan)
    return np.clip(p, P_FLOOR, 1 - P_FLOOR) if p.ndim else (
        float(np.clip(p, P_FLOOR, 1 - P_FLOOR)) if np.isfinite(p) else float("nan"))


def cluster_limit(eps: float, p):
    """Largest inter-time (exclusive, minutes) that still links two events."""
    return np.log1p(-eps) / np.log1p(-np.asarray(p, dtype=float)) - 1.0 if np.ndim(p) else (
        float(np.log1p(-eps) / np.log1p(-p) - 1.0))


def cluster_labels(times, limit) -> np.ndarray:
    """Single-linkage cluster index for sorted event times.

    ``limit`` may be a scalar or one value per event; the pair (k-1, k) links
    when ``t_k - t_{k-1} < limit[k-1]`` and both fall on the same day.
    """
    t = np.asarray(times, dtype="datetime64[m]")
    if t.size == 0:
        return np.zeros(0, dtype=int)
    if np.any(np.diff(t.astype(np.int64)) < 0):
        raise ValueError("event times must be sorted")
    lim = np.broadcast_to(np.asarray(limit, dtype=float), t.shape)
    dt = np.diff(t.astype(np.int64)).astype(float)
    day = t.astype("datetime64[D]")
    link = (dt < lim[:-1]) & (day[1:] == day[:-1])
    return np.concatenate(([0], np.cumsum(~link)))


def cluster_events(times, limit) -> list:
    """Group sorted event times into clusters; returns index arrays by ``t_first``."""
    lab = cluster_labels(times, limit)
    if lab.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(lab)) + 1
    return np.split(np.arange(lab.size), cuts)


def month_minutes(session_dates, minutes_per_session: int = 390) -> dict:
    months, counts = np.unique(np.asarray(session_dates, dtype="datetime64[M]"), return_counts=True)
    return {m: int(c) * minutes_per_session for m, c in zip(months, counts)}


def rate_by_month(times, minutes_by_month: dict) -> np.ndarray:
    """Per-event Bernoulli rate of the event's calendar month."""
    t = np.asarray(times, dtype="datetime64[m]")
    month = t.astype("datetime64[M]")
    uniq, inv, counts = np.unique(month, return_inverse=True, return_counts=True)
    mins = np.array([minutes_by_month.get(m, 0) for m in uniq], dtype=float)
    p = calibrate_p(counts, mins)
    return np.atleast_1d(p)[inv]


def build_jump_clusters(stock, times, scores, minutes_by_month, eps=0.05) -> list:
    times = np.asarray(times, dtype="datetime64[m]")
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(times, kind="stable")
    times, scores = times[order], scores[order]
    if times.size == 0:
        return []
    p = rate_by_month(times, minutes_by_month)
    lim = np.where(np.isfinite(p), cluster_limit(eps, np.nan_to_num(p, nan=0.5)), -1.0)
    return [JumpCluster(stock, times[ix], scores[ix]) for ix in cluster_events(times, lim)]


def build_news_clusters(stock, times, eps=0.05, minutes_by_month=None) -> list:
    """News clusters under the same rule, with p from news counts per month.

    News arrive around the clock, so the default denominator is every calendar
    minute of the month.
    """
    times = np.sort(np.asarray(times, dtype="datetime64[m]"))
    if times.size == 0:
        return []
    if minutes_by_month is None:
        months = np.unique(times.astype("datetime64[M]"))
        minutes_by_month = {m: int(((m + 1).astype("datetime64[D]") - m.astype("datetime64[D]"))
                                   .astype(int)) * 1440 for m in months}
    p = rate_by_month(times, minutes_by_month)
    lim = np.where(np.isfinite(p), cluster_limit(eps, np.nan_to_num(p, nan=0.5)), -1.0)
    return [NewsCluster(stock, times[ix]) for ix in cluster_events(times, lim)]


def align_news(jump_clusters, news_clusters, window=(-1, 4)) -> list:
    """Label each jump cluster EXO or ENDO from news-cluster starts.

    EXO when ``t_first`` lies in ``[news_first + window[0], news_first + window[1]]``
    for some news cluster. ENDO clusters starting strictly inside a news
    cluster's span are DISCARDED with reason ``inside_news_cluster``.
    """
    if news_clusters:
        starts = np.array([n.t_first for n in news_clusters], dtype="datetime64[m]").astype(np.int64)
        ends = np.array([n.t_last for n in news_clusters], dtype="datetime64[m]").astype(np.int64)
        order = np.argsort(starts)
        starts, ends = starts[order], ends[order]
    lo, hi = window
    for c in jump_clusters:
        c.news_class, c.label, c.reason = ENDO, ENDO, "none"
        if not news_clusters:
            continue
        t = np.datetime64(c.t_first, "m").astype(np.int64)
        # news starts s with s + lo <= t <= s + hi
        a = np.searchsorted(starts, t - hi, side="left")
        b = np.searchsorted(starts, t - lo, side="right")
        if b > a:
            c.news_class = c.label = EXO
            continue
        inside = (starts < t) & (ends > t)
        if inside.any():
            c.label, c.reason = DISCARDED, "inside_news_cluster"
    return jump_clusters


def _spans(clusters):
    s = np.array([np.datetime64(c.t_first, "m") for c in clusters], dtype="datetime64[m]").astype(np.int64)
    e = np.array([np.datetime64(c.t_last, "m") for c in clusters], dtype="datetime64[m]").astype(np.int64)
    return s, e


def overlap_counts(starts, ends, stock_ids, q_starts, q_ends, q_stock_ids) -> np.ndarray:
    """Number of distinct other stocks with a span intersecting each query span.

    Spans are closed intervals; a singleton has zero length.
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    stock_ids = np.asarray(stock_ids)
    q_starts = np.asarray(q_starts, dtype=np.int64)
    q_ends = np.asarray(q_ends, dtype=np.int64)
    q_stock_ids = np.asarray(q_stock_ids)
    nq = q_starts.size
    if starts.size == 0 or nq == 0:
        return np.zeros(nq, dtype=int)
    order = np.argsort(starts, kind="stable")
    s, e, sid = starts[order], ends[order], stock_ids[order]
    maxlen = int((e - s).max())
    lo = np.searchsorted(s, q_starts - maxlen, side="left")
    hi = np.searchsorted(s, q_ends, side="right")
    n_cand = hi - lo
    total = int(n_cand.sum())
    if total == 0:
        return np.zeros(nq, dtype=int)
    q_idx = np.repeat(np.arange(nq), n_cand)
    offs = np.arange(total) - np.repeat(np.cumsum(n_cand) - n_cand, n_cand)
    cand = lo[q_idx] + offs
    hit = (e[cand] >= q_starts[q_idx]) & (sid[cand] != q_stock_ids[q_idx])
    q_idx, cand = q_idx[hit], cand[hit]
    if q_idx.size == 0:
        return np.zeros(nq, dtype=int)
    pairs = np.unique(np.stack([q_idx, sid[cand].astype(np.int64)], axis=1), axis=0)
    return np.bincount(pairs[:, 0], minlength=nq)


def _month_slots(session_dates, months):
    """Start-of-session minute stamps for each month, from the admitted sessions."""
    out = {}
    d = np.asarray(session_dates, dtype="datetime64[D]")
    dm = d.astype("datetime64[M]")
    for m in months:
        days = d[dm == m]
        if days.size == 0:
            first = m.astype("datetime64[D]")
            last = (m + 1).astype("datetime64[D]")
            days = np.arange(first, last, dtype="datetime64[D]")
            days = days[np.is_busday(days)]
        out[m] = (days.astype("datetime64[m]") + np.timedelta64(570, "m")).astype(np.int64)
    return out


def shuffle_spans(starts, ends, stock_ids, rng, session_dates=None, session_minutes=390,
                  max_rounds=200):
    """Reposition every span uniformly inside its calendar month's sessions.

    Lengths are preserved, spans stay within one session, and spans of the same
    stock are redrawn until none overlap (rejection sampling).
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    lengths = ends - starts
    months = starts.astype("datetime64[m]").astype("datetime64[M]")
    uniq = np.unique(months)
    slots = _month_slots(session_dates if session_dates is not None else np.array([], "datetime64[D]"), uniq)
    new_s = np.empty_like(starts)
    todo = np.arange(starts.size)
    for _ in range(max_rounds):
        for m in uniq:
            sel = todo[months[todo] == m]
            if sel.size == 0:
                continue
            opens = slots[m]
            day = rng.integers(0, opens.size, sel.size)
            room = np.maximum(session_minutes - lengths[sel], 1)
            new_s[sel] = opens[day] + np.floor(rng.random(sel.size) * room).astype(np.int64)
        new_e = new_s + lengths
        order = np.lexsort((new_s, stock_ids))
        same = stock_ids[order][1:] == stock_ids[order][:-1]
        clash = same & (new_s[order][1:] <= new_e[order][:-1])
        if not clash.any():
            return new_s, new_e
        todo = np.unique(order[1:][clash])
    return new_s, new_s + lengths


def market_wide_filter(clusters, threshold: int = 30, mode=None, rng=None, n_shuffles=1000,
                       alpha=0.05, session_dates=None) -> MarketWideResult:
    """Flag clusters that coincide with clusters of many other stocks.

    Threshold mode flags a cluster when more than ``threshold`` other stocks have
    an overlapping cluster. Shuffle mode compares the observed count with the
    ``1 - alpha`` quantile of counts obtained after repositioning all clusters
    at random within their month.
    """
    clusters = list(clusters)
    if not clusters:
        return MarketWideResult(np.zeros(0, int), np.zeros(0, bool))
    s, e = _spans(clusters)
    names = sorted({c.stock for c in clusters})
    index = {n: i for i, n in enumerate(names)}
    sid = np.array([index[c.stock] for c in clusters])
    observed = overlap_counts(s, e, sid, s, e, sid)
    if mode is None:
        return MarketWideResult(observed, observed > threshold)
    if mode != "shuffle":
        raise ConfigError(f"unknown market-wide null mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    null = np.empty((n_shuffles, s.size), dtype=np.int32)
    for k in range(n_shuffles):
        ns, ne = shuffle_spans(s, e, sid, rng, session_dates)
        null[k] = overlap_counts(ns, ne, sid, s, e, sid)
    q = np.quantile(null, 1 - alpha, axis=0)
    return MarketWideResult(observed, observed > q, q, null)


def contamination_filter(clusters, gap: int = 100) -> np.ndarray:
    """True for clusters whose start lies within ``gap`` minutes of another's."""
    clusters = list(clusters)
    flags = np.zeros(len(clusters), dtype=bool)
    if len(clusters) < 2:
        return flags
    t = np.array([np.datetime64(c.t_first, "m") for c in clusters], dtype="datetime64[m]").astype(np.int64)
    order = np.argsort(t, kind="stable")
    close = np.diff(t[order]) < gap
    flags[order[1:][close]] = True
    flags[order[:-1][close]] = True
    return flags


def apply_filters(clusters_by_stock: dict, news_by_stock: dict, cfg: ClusterConfig,
                  rng=None, session_dates=None) -> list:
    """Label and filter all clusters; returns them in (stock, t_first) order.

    Discard reasons take precedence inside_news_cluster > market_wide >
    contamination.
    """
    all_clusters = []
    for stock in sorted(clusters_by_stock):
        cl = clusters_by_stock[stock]
        align_news(cl, news_by_stock.get(stock, []), cfg.news_window)
        contam = contamination_filter(cl, cfg.contamination_gap)
        for c, bad in zip(cl, contam):
            c._contaminated = bool(bad)
        all_clusters.extend(cl)
    mw = market_wide_filter(all_clusters, cfg.market_wide_threshold, cfg.mw_null, rng,
                            cfg.n_shuffles, cfg.mw_alpha, session_dates)
    for i, (c, flag) in enumerate(zip(all_clusters, mw.flags)):
        c.cluster_id = i
        c.overlaps = int(mw.overlaps[i])
        if c.reason == "inside_news_cluster":
            pass
        elif flag:
            c.label, c.reason = DISCARDED, "market_wide"
        elif c._contaminated:
            c.label, c.reason = DISCARDED, "contamination"
        del c._contaminated
    return all_clusters


def kendall_tau(cluster) -> float:
    """Tau-b between chronological order and amplitude rank (rank 1 = largest |J|).

    +1 when the first jump is the largest and amplitudes decrease in time.
    NaN for clusters with fewer than two jumps.
    """
    amp = np.abs(np.asarray(cluster.scores if hasattr(cluster, "scores") else cluster, dtype=float))
    if amp.size < 2:
        return float("nan")
    res = stats.kendalltau(np.arange(amp.size), -amp)
    return float(res.statistic)


def same_day_intertimes(times) -> np.ndarray:
    """Minutes between consecutive events that fall on the same day."""
    t = np.sort(np.asarray(times, dtype="datetime64[m]"))
    if t.size < 2:
        return np.zeros(0)
    day = t.astype("datetime64[D]")
    dt = np.diff(t.astype(np.int64)).astype(float)
    return dt[day[1:] == day[:-1]]


def cluster_intertimes(clusters) -> np.ndarray:
    """Same-day waiting times from the end of one cluster to the start of the next."""
    cl = sorted(clusters, key=lambda c: c.t_first)
    if len(cl) < 2:
        return np.zeros(0)
    s, e = _spans(cl)
    day = np.array([np.datetime64(c.t_first, "D") for c in cl])
    gap = (s[1:] - e[:-1]).astype(float)
    return gap[day[1:] == day[:-1]]


def exponential_ks(intertimes) -> float:
    """KS p-value of waiting times against an exponential with fitted location and scale.

    The location absorbs the lower bound that clustering puts on the gaps
    between clusters; for memoryless arrivals the excess is still exponential.
    """
    x = np.asarray(intertimes, dtype=float)
    if x.size < 2:
        return float("nan")
    loc, scale = stats.expon.fit(x)
    return float(stats.kstest(x, "expon", args=(loc, scale)).pvalue)
