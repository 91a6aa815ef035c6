"""Jump scores from bipower volatility and intraday periodicity, plus detection.

A return is standardised as ``J_t = r_t / (sigma_t * f_t)``, where ``sigma_t``
is a rolling bipower volatility and ``f_t`` a per-minute-of-day periodicity
factor. Minutes with ``|J_t|`` above an extreme-value threshold are jumps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data_model import SESSION_MINUTES, ReturnSeries, session_timestamps
from .errors import ConfigError

log = logging.getLogger(__name__)

#: truncation thresholds on squared standardized returns for the two passes
PASS_THRESHOLDS = (16.0, 6.635)
#: consistency constant of the truncated second moment
WSD_CONSTANT = 1.081


@dataclass
class DetectorConfig:
    K: int = 390
    alpha: float = 0.01
    edge_exclusion: int = 15
    norm_window: int = SESSION_MINUTES
    min_slot_obs: int = 30

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.edge_exclusion < 0:
            raise ConfigError("edge_exclusion must be >= 0")
        if not 1 <= self.norm_window <= SESSION_MINUTES:
            raise ConfigError("norm_window must lie in [1, 390]")

    @property
    def threshold(self) -> float:
        return gumbel_threshold(self.K, self.alpha)


@dataclass
class PeriodicityModel:
    f0: np.ndarray
    f1: np.ndarray
    f: np.ndarray
    W0: np.ndarray
    W1: np.ndarray
    n_obs: np.ndarray
    thresholds: tuple = PASS_THRESHOLDS
    norm_window: int = SESSION_MINUTES
    fallback_slots: list = field(default_factory=list)


@dataclass
class JumpScoreSeries:
    stock: str
    dates: np.ndarray
    r: np.ndarray
    sigma: np.ndarray
    f: np.ndarray  # (390,) periodicity factor per slot
    J: np.ndarray
    periodicity: PeriodicityModel | None = None

    @property
    def abs_J(self) -> np.ndarray:
        return np.abs(self.J)

    def timestamps(self) -> np.ndarray:
        return session_timestamps(self.dates)


@dataclass(frozen=True)
class JumpEvent:
    stock: str
    timestamp: np.datetime64
    score: float
    abs_score: float
    threshold: float


def gumbel_threshold(K: int, alpha: float) -> float:
    """Level above which ``|J|`` rejects the no-jump null at significance ``alpha``."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if K < 2:
        raise ConfigError("K must be >= 2")
    two_log_k = 2.0 * math.log(K)
    s_k = two_log_k**-0.5
    c_k = two_log_k**0.5 - (math.log(math.pi) + math.log(math.log(K))) / (2.0 * two_log_k**0.5)
    return c_k - s_k * math.log(math.log(1.0 / (1.0 - alpha)))


def bipower_volatility(returns, K: int = 390, max_lookback: int | None = None) -> np.ndarray:
    """Rolling bipower volatility on the session grid.

    ``sigma_t^2 = pi/(2K) * sum |r_{t-i}| |r_{t-i+1}|`` over the K most recent
    adjacent pairs ending at or before ``t``. Pairs touching a MISSING return
    (which includes every pair straddling a session open) are skipped and the
    window reaches further back, but never past ``max_lookback`` (default 2K)
    pairs; otherwise ``sigma_t`` is MISSING.
    """
    r = returns.r if isinstance(returns, ReturnSeries) else np.asarray(returns, dtype=float)
    shape = r.shape
    lookback = 2 * K if max_lookback is None else max_lookback
    flat = np.ascontiguousarray(np.abs(r).ravel())
    return kernels.bipower_sigma(flat, int(K), int(lookback)).reshape(shape)


def _wsd(std_returns: np.ndarray, x: float, min_obs: int):
    sq = std_returns**2
    finite = np.isfinite(sq)
    with np.errstate(invalid="ignore"):
        w = finite & (sq < x)
    n_obs = finite.sum(axis=0)
    num = np.where(w, sq, 0.0).sum(axis=0)
    den = w.sum(axis=0)
    ok = (den > 0) & (n_obs >= min_obs)
    W = np.full(sq.shape[1], np.nan)
    W[ok] = np.sqrt(WSD_CONSTANT * num[ok] / den[ok])
    return W, n_obs, ok


def _normalise(W: np.ndarray, ok: np.ndarray, T: int) -> np.ndarray:
    m = W.size
    W2 = np.where(ok, W**2, 0.0)
    cnt = ok.astype(float)
    if T >= m:
        denom = np.full(m, W2.sum() / max(cnt.sum(), 1.0))
    else:
        # trailing cyclic window of T slots
        idx = (np.arange(m)[:, None] - np.arange(T)[None, :]) % m
        denom = W2[idx].sum(axis=1) / np.maximum(cnt[idx].sum(axis=1), 1.0)
    f = np.ones(m)
    good = ok & (denom > 0)
    f[good] = W[good] / np.sqrt(denom[good])
    return f


def periodicity_factors(std_returns: np.ndarray, norm_window: int = SESSION_MINUTES,
                        min_obs: int = 30) -> PeriodicityModel:
    """Two-pass weighted-standard-deviation periodicity per minute-of-day slot.

    ``std_returns`` is ``r_t / sigma_t`` on the ``(n_sessions, 390)`` grid. The
    first pass truncates squared values at 16, the second re-estimates on
    ``std_returns / f0`` truncated at 6.635; the final factor ``f0 * f1`` is
    rescaled so that its square averages to one over the usable slots.
    Slots with fewer than ``min_obs`` observations or no retained weight get
    factor 1.
    """
    z = np.asarray(std_returns, dtype=float)
    W0, n_obs, ok0 = _wsd(z, PASS_THRESHOLDS[0], min_obs)
    f0 = _normalise(W0, ok0, norm_window)
    W1, _, ok1 = _wsd(z / f0[None, :], PASS_THRESHOLDS[1], min_obs)
    f1 = _normalise(W1, ok1, norm_window)
    ok = ok0 & ok1
    f = f0 * f1
    if ok.any():
        f[ok] /= math.sqrt(np.mean(f[ok] ** 2))
    f[~ok] = 1.0
    fallback = [int(i) for i in np.flatnonzero(~ok)]
    if fallback:
        log.debug("periodicity: %d slots fall back to factor 1", len(fallback))
    return PeriodicityModel(f0, f1, f, W0, W1, n_obs, PASS_THRESHOLDS, norm_window, fallback)


def compute_scores(returns: ReturnSeries, cfg: DetectorConfig | None = None,
                   periodicity: PeriodicityModel | None = None) -> JumpScoreSeries:
    cfg = cfg or DetectorConfig()
    sigma = bipower_volatility(returns, cfg.K)
    r = returns.r
    with np.errstate(invalid="ignore", divide="ignore"):
        good = np.isfinite(r) & np.isfinite(sigma) & (sigma > 0)
        z = np.where(good, r / np.where(good, sigma, 1.0), np.nan)
    if periodicity is None:
        periodicity = periodicity_factors(z, cfg.norm_window, cfg.min_slot_obs)
    J = z / periodicity.f[None, :]
    return JumpScoreSeries(returns.stock, returns.dates, r, sigma, periodicity.f, J, periodicity)


def jump_mask(scores: JumpScoreSeries, cfg: DetectorConfig | None = None) -> np.ndarray:
    cfg = cfg or DetectorConfig()
    with np.errstate(invalid="ignore"):
        mask = np.abs(scores.J) > cfg.threshold
    e = cfg.edge_exclusion
    if e:
        mask[:, :e] = False
        mask[:, SESSION_MINUTES - e:] = False
    return mask


def detect_jumps(scores: JumpScoreSeries, cfg: DetectorConfig | None = None) -> list:
    """Jump events at minutes with ``|J|`` above the threshold, outside the edges."""
    cfg = cfg or DetectorConfig()
    thr = cfg.threshold
    mask = jump_mask(scores, cfg)
    ts = scores.timestamps()
    rows, cols = np.nonzero(mask)
    return [JumpEvent(scores.stock, ts[i, j], float(scores.J[i, j]), float(abs(scores.J[i, j])), thr)
            for i, j in zip(rows, cols)]
