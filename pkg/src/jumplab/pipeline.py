"""In-memory pipeline stages shared by the command line and the tests.

Each stage takes the previous stage's objects and returns plain containers,
so a run can be driven either from files (see ``cli``) or directly.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import classifier, cluster_engine, data_model, jump_detector, powerlaw, profile_builder
from .cluster_engine import ENDO, EXO, ClusterConfig
from .data_model import SESSION_MINUTES
from .jump_detector import DetectorConfig

log = logging.getLogger(__name__)


@dataclass
class StockData:
    stock: str
    calendar: data_model.SessionCalendar
    mids: data_model.MidPriceSeries
    returns: data_model.ReturnSeries
    grid: data_model.SessionGrid


@dataclass
class Detection:
    scores: jump_detector.JumpScoreSeries
    mask: np.ndarray
    times: np.ndarray
    J: np.ndarray


@dataclass
class FitRecord:
    cluster_id: int
    stock: str
    label: str
    size: int
    fit: powerlaw.DoublePowerLawFit
    asym: powerlaw.Asymmetry
    kept: bool
    window: np.ndarray = field(repr=False, default=None)


@dataclass
class Classification:
    models: dict  # link -> RegressionModel
    oos: dict  # link -> SplitResult
    ari: dict  # mode -> AriCurve
    n_endo: int
    n_exo: int
    notice: str = ""


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator per stage, fixed by the run seed and the stage name."""
    key = [int.from_bytes(stage.encode(), "little") % (2**32)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + key))


def _map(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# --- ingest & detect -------------------------------------------------------------

def ingest_stock(book: data_model.LobSnapshots, min_changes=300, max_missing_run=25,
                 max_still_run=25) -> StockData:
    grid = data_model.to_grid(book)
    mids = data_model.mid_from_grid(grid)
    cal = data_model.filter_sessions(mids, min_changes, max_missing_run, max_still_run)
    keep = cal.admitted_mask
    mids, grid = mids.take(keep), grid.take(keep)
    return StockData(book.stock, cal, mids, data_model.compute_returns(mids), grid)


def ingest(books: dict, jobs: int = 1, **filters) -> dict:
    names = sorted(books)
    out = _map(lambda s: ingest_stock(books[s], **filters), names, jobs)
    return dict(zip(names, out))


def detect_stock(returns: data_model.ReturnSeries, cfg: DetectorConfig) -> Detection:
    scores = jump_detector.compute_scores(returns, cfg)
    mask = jump_detector.jump_mask(scores, cfg)
    ts = scores.timestamps()
    return Detection(scores, mask, ts[mask], scores.J[mask])


def detect(stocks: dict, cfg: DetectorConfig, jobs: int = 1) -> dict:
    names = sorted(stocks)
    out = _map(lambda s: detect_stock(stocks[s].returns, cfg), names, jobs)
    return dict(zip(names, out))


# --- clustering --------------------------------------------------------------------

def cluster(jumps: dict, dates: dict, news_times: dict, cfg: ClusterConfig, rng=None) -> list:
    """Cluster and label the jumps of every stock.

    ``jumps`` maps stock -> (times, J); ``dates`` maps stock -> admitted session
    dates (the Bernoulli rate denominators); ``news_times`` maps stock -> news
    timestamps.
    """
    by_stock, news_by_stock = {}, {}
    all_dates = []
    for stock in sorted(jumps):
        t, J = jumps[stock]
        d = np.asarray(dates.get(stock, []), dtype="datetime64[D]")
        all_dates.append(d)
        mins = cluster_engine.month_minutes(d, SESSION_MINUTES)
        by_stock[stock] = cluster_engine.build_jump_clusters(stock, t, J, mins, cfg.eps)
        nt = news_times.get(stock)
        if nt is not None and len(nt):
            eps = cfg.news_eps if cfg.news_eps is not None else cfg.eps
            news_by_stock[stock] = cluster_engine.build_news_clusters(stock, nt, eps)
    session_dates = np.unique(np.concatenate(all_dates)) if all_dates else None
    return cluster_engine.apply_filters(by_stock, news_by_stock, cfg, rng, session_dates)


# --- profiles ---------------------------------------------------------------------

def observables(stocks: dict, detections: dict, kappa: float = 0.12, burn_in: int = 30) -> dict:
    return {s: profile_builder.build_observables(detections[s].scores, detections[s].mask,
                                                 stocks[s].grid if stocks.get(s) else None,
                                                 kappa, burn_in)
            for s in sorted(detections)}


def aggregate_profiles(panel: profile_builder.ProfilePanel, n_boot=1000, band=0.01, baseline=20,
                       fdr=0.01, rng=None) -> dict:
    """Per class and observable aggregate profiles; classes with < 2 clusters are skipped."""
    rng = np.random.default_rng() if rng is None else rng
    out = {}
    for label in (EXO, ENDO):
        sub = panel.select(label)
        if len(sub) < 2:
            continue
        out[label] = {name: profile_builder.aggregate(sub.data[name], panel.offsets, n_boot, band,
                                                      baseline, fdr, rng)
                      for name in profile_builder.OBSERVABLES}
    return out


# --- fits & classification ---------------------------------------------------------

def fit_panel(panel: profile_builder.ProfilePanel, sizes: dict, method: str = "direct",
              min_size: int = 2, grid_step: float = 0.01, max_rel_err: float = 1.0,
              stocks: dict | None = None) -> list:
    """Fit every ``|J|`` window of clusters with at least ``min_size`` jumps.

    ``sizes`` and the optional ``stocks`` map cluster id to size and ticker.
    """
    stocks = stocks or {}
    offs = panel.offsets
    t_min, t_max = int(offs[0]), int(offs[-1])
    records = []
    for i, cid in enumerate(panel.cluster_ids):
        size = sizes.get(int(cid), 1)
        if size < min_size:
            continue
        y = panel.data["abs_J"][i]
        try:
            if method == "direct":
                fit = powerlaw.fit_direct(y, offs)
            else:
                fit = powerlaw.fit_closed_form(y, offs, grid_step=grid_step)
        except ValueError as exc:
            log.debug("cluster %s not fitted: %s", cid, exc)
            continue
        asym = powerlaw.asymmetry(fit, t_min, t_max)
        kept = powerlaw.passes_quality(fit, max_rel_err) and np.isfinite(asym.A)
        records.append(FitRecord(int(cid), str(stocks.get(int(cid), "")), str(panel.labels[i]), int(size), fit, asym, kept, y))
    return records


def features(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    kept = [r for r in records if r.kept]
    X = np.array([[r.fit.p_l, r.fit.p_r, r.asym.A] for r in kept], dtype=float).reshape(-1, 3)
    y = np.array([1 if r.label == EXO else 0 for r in kept], dtype=int)
    raw = np.array([r.window for r in kept], dtype=float) if kept else np.zeros((0, 0))
    return X, y, raw


def classify(records, links=("logit", "probit"), reps=1000, test_frac=0.2, Ks=range(1, 41),
             n_boot=200, band=0.01, abs_A=False, rng=None) -> Classification:
    X, y, raw = features(records)
    return classify_arrays(X, y, raw, links, reps, test_frac, Ks, n_boot, band, abs_A, rng)


def classify_arrays(X, y, raw, links=("logit", "probit"), reps=1000, test_frac=0.2,
                    Ks=range(1, 41), n_boot=200, band=0.01, abs_A=False, rng=None) -> Classification:
    """Regressions, out-of-sample AUC and ARI curves for embedded features ``X``.

    ``raw`` holds the matching ``|J|`` windows (rows, NaN = MISSING) for the
    raw-series k-NN comparison.
    """
    rng = np.random.default_rng() if rng is None else rng
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=int)
    n_exo, n_endo = int(y.sum()), int((1 - y).sum())
    if min(n_exo, n_endo) < 5:
        return Classification({}, {}, {}, n_endo, n_exo,
                              "regression skipped: fewer than 5 fitted clusters in a class")
    models, oos = {}, {}
    for link in links:
        models[link] = classifier.fit_binary_regression(X, y, link)
        oos[link] = classifier.train_test_eval(X, y, link, test_frac, reps, rng)
    emb = X.copy()
    if abs_A:
        emb[:, 2] = np.abs(emb[:, 2])
    Ks = [k for k in Ks if k < 2 * min(n_exo, n_endo)]
    curves = {
        "embedding": classifier.ari_curve(emb, y, Ks, n_boot, band, rng),
        "raw": classifier.ari_curve(classifier.impute_median(raw), y, Ks, n_boot, band, rng),
    }
    return Classification(models, oos, curves, n_endo, n_exo)
