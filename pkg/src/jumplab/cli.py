"""Command line front end: one subcommand per pipeline stage.

Every stage reads only files written by earlier stages into the output
directory and writes delimited tables with a ``#`` preamble. Parameters come
from built-in defaults, then a flat ``key = value`` config file, then
``JUMPLAB_<KEY>`` environment variables, then command-line flags.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import traceback

import numpy as np
import pandas as pd

from . import __version__
from . import data_model, hawkes_sim, pipeline, powerlaw, profile_builder
from .cluster_engine import DISCARDED, ENDO, EXO, ClusterConfig, JumpCluster
from .data_model import SESSION_MINUTES, MidPriceSeries, split_timestamps
from .errors import ConfigError, DataError, InputFormatError, JumplabError
from .jump_detector import DetectorConfig, JumpScoreSeries
from .tables import fmt_minutes, parse_minutes, read_meta, read_table, write_table

log = logging.getLogger("jumplab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3
FAILED_MARKER = "FAILED"

# key -> (default, stage); the default's type fixes the parser
DEFAULTS = {
    "seed": (0, "general"),
    "jobs": (1, "general"),
    "out": ("out", "general"),
    "panel": ("", "general"),
    "news": ("", "general"),
    "log_level": ("INFO", "general"),
    # ingest
    "min_changes": (300, "ingest"),
    "max_missing_run": (25, "ingest"),
    "max_still_run": (25, "ingest"),
    # detect
    "k": (390, "detect"),
    "alpha": (0.01, "detect"),
    "edge": (15, "detect"),
    # cluster
    "eps": (0.05, "cluster"),
    "news_eps": ("", "cluster"),
    "news_window": ("-1:4", "cluster"),
    "mw_threshold": (30, "cluster"),
    "contamination": (100, "cluster"),
    "mw_null": ("none", "cluster"),
    "n_shuffles": (1000, "cluster"),
    "mw_alpha": (0.05, "cluster"),
    # profile
    "kappa": (0.12, "profile"),
    "window": (160, "profile"),
    "burn_in": (30, "profile"),
    "boot": (1000, "profile"),
    "band": (0.01, "profile"),
    "baseline": (20, "profile"),
    "fdr": (0.01, "profile"),
    # fit
    "method": ("direct", "fit"),
    "grid": (0.01, "fit"),
    "min_size": (2, "fit"),
    "max_rel_err": (1.0, "fit"),
    # classify
    "link": ("logit,probit", "classify"),
    "splits": (1000, "classify"),
    "test_frac": (0.2, "classify"),
    "knn_k": ("1..40", "classify"),
    "ari_boot": (200, "classify"),
    "ari_band": (0.01, "classify"),
    "abs_a": (False, "classify"),
    # simulate
    "theta": (0.3, "simulate"),
    "n": (0.98, "simulate"),
    "lambda0": (0.05, "simulate"),
    "tau0": (1.0, "simulate"),
    "horizon": (0.0, "simulate"),
    "stocks": (300, "simulate"),
    "sessions": (60, "simulate"),
    "start_date": ("2024-01-02", "simulate"),
    "shock_rate": (0.1, "simulate"),
    "shock_size": (150.0, "simulate"),
    "sigma0": (5e-4, "simulate"),
    "nu": (2.5, "simulate"),
    "vol_exponent": (1.0, "simulate"),
    "noise": (0.0, "simulate"),
    "seasonality": (0.0, "simulate"),
    "sim_burn_in": (100_000.0, "simulate"),
    "news_noise": (0.0, "simulate"),
}

COMMAND_STAGES = {
    "ingest": ("ingest",),
    "detect": ("detect",),
    "cluster": ("cluster",),
    "profile": ("profile",),
    "fit": ("fit",),
    "classify": ("classify",),
    "report": (),
    "simulate": ("simulate",),
    "run": ("ingest", "detect", "cluster", "profile", "fit", "classify"),
}


# --- configuration --------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value):
    """Convert ``value`` to the type of ``key``'s default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown parameter: {key}")
    default = DEFAULTS[key][0]
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value.strip()


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key = key.strip().lower().replace("-", "_")
            out[key] = coerce(key, value.strip())
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith("JUMPLAB_"):
            continue
        key = name[len("JUMPLAB_"):].lower()
        if key in DEFAULTS:
            out[key] = coerce(key, value)
    return out


def resolve_config(config_file=None, flags=None, environ=None) -> dict:
    """Defaults < config file < environment < flags."""
    cfg = {k: v[0] for k, v in DEFAULTS.items()}
    if config_file:
        cfg.update(read_config_file(config_file))
    cfg.update(env_overrides(environ))
    for k, v in (flags or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    validate(cfg)
    return cfg


def parse_range(text: str) -> list:
    """``"1..40"`` or ``"1,3,5"`` to a list of ints."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer range: {text!r}") from exc
    if not out or min(out) < 1:
        raise ConfigError(f"range must hold positive integers: {text!r}")
    return out


def parse_window(text: str) -> tuple:
    try:
        lo, hi = (int(x) for x in str(text).split(":"))
    except ValueError as exc:
        raise ConfigError(f"news_window must look like -1:4, got {text!r}") from exc
    if lo > hi:
        raise ConfigError("news_window start after its end")
    return lo, hi


def validate(cfg: dict) -> None:
    parse_window(cfg["news_window"])
    parse_range(cfg["knn_k"])
    links = [x.strip() for x in cfg["link"].split(",") if x.strip()]
    if not links or set(links) - {"logit", "probit"}:
        raise ConfigError("link must be logit, probit or both")
    if cfg["method"] not in ("direct", "closed"):
        raise ConfigError("method must be direct or closed")
    if cfg["mw_null"] not in ("none", "shuffle"):
        raise ConfigError("mw_null must be none or shuffle")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg["window"] < 2 or cfg["window"] % 2:
        raise ConfigError("window must be an even number >= 2")
    if not 0 < cfg["test_frac"] < 1:
        raise ConfigError("test_frac must lie in (0, 1)")
    if cfg["log_level"].upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError("log_level must be DEBUG, INFO, WARNING or ERROR")


def detector_config(cfg) -> DetectorConfig:
    return DetectorConfig(K=cfg["k"], alpha=cfg["alpha"], edge_exclusion=cfg["edge"])


def cluster_config(cfg) -> ClusterConfig:
    return ClusterConfig(
        eps=cfg["eps"],
        news_eps=float(cfg["news_eps"]) if cfg["news_eps"] else None,
        news_window=parse_window(cfg["news_window"]),
        market_wide_threshold=cfg["mw_threshold"],
        contamination_gap=cfg["contamination"],
        mw_null=None if cfg["mw_null"] == "none" else cfg["mw_null"],
        n_shuffles=cfg["n_shuffles"],
        mw_alpha=cfg["mw_alpha"],
    )


def write_manifest(out_dir, command: str, cfg: dict) -> None:
    """Versions, seed and every parameter; no timestamps so reruns match."""
    import scipy
    import sklearn

    lines = [
        f"command = {command}",
        f"jumplab = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"pandas = {pd.__version__}",
        f"scikit-learn = {sklearn.__version__}",
        f"backend = {_backend()}",
    ]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _backend() -> str:
    from . import kernels

    return kernels.BACKEND


# --- file helpers --------------------------------------------------------------

def _path(cfg, name):
    return os.path.join(cfg["out"], name)


def _need(path):
    if not os.path.exists(path):
        raise DataError(f"missing input {path}; run the earlier stage first")
    return path


def _grid_frame(stock, dates, columns: dict) -> pd.DataFrame:
    ts = data_model.session_timestamps(dates).ravel()
    d = {"stock": np.full(ts.size, stock, dtype=object), "ts": fmt_minutes(ts)}
    for name, arr in columns.items():
        d[name] = np.asarray(arr, dtype=float).ravel()
    return pd.DataFrame(d)


def _frame_to_grids(df: pd.DataFrame, columns) -> dict:
    """Inverse of ``_grid_frame``: stock -> (dates, {column: (n, 390)})."""
    out = {}
    if df.empty:
        return out
    stocks = df["stock"].astype(str).to_numpy()
    ts = parse_minutes(df["ts"])
    for stock in pd.unique(stocks):
        sel = stocks == stock
        day, slot = split_timestamps(ts[sel])
        if np.any((slot < 0) | (slot >= SESSION_MINUTES)):
            raise InputFormatError(f"{stock}: timestamp outside the session grid")
        dates, row = np.unique(day, return_inverse=True)
        cols = {}
        for name in columns:
            g = np.full((dates.size, SESSION_MINUTES), np.nan)
            g[row, slot] = df[name].to_numpy(dtype=float)[sel]
            cols[name] = g
        out[str(stock)] = (dates, cols)
    return out


def _read_admitted_dates(cfg) -> dict:
    cal, _ = read_table(_need(_path(cfg, "calendar.csv")), dtype={"stock": str, "date": str})
    out = {}
    for stock, grp in cal.groupby("stock", sort=True):
        d = grp.loc[grp["admitted"].astype(int) == 1, "date"].to_numpy(dtype="datetime64[D]")
        out[str(stock)] = np.sort(d)
    return out


def _read_jumps(cfg) -> tuple[dict, dict]:
    df, meta = read_table(_need(_path(cfg, "jumps.csv")), dtype={"stock": str, "ts": str})
    out = {}
    if not df.empty:
        ts = parse_minutes(df["ts"])
        J = df["J"].to_numpy(dtype=float)
        stocks = df["stock"].to_numpy()
        for stock in pd.unique(stocks):
            sel = stocks == stock
            order = np.argsort(ts[sel], kind="stable")
            out[str(stock)] = (ts[sel][order], J[sel][order])
    return out, meta


def _meta(cfg, stage: str, **extra) -> dict:
    meta = {"stage": stage, "seed": cfg["seed"]}
    meta.update({k: cfg[k] for k in sorted(cfg) if DEFAULTS[k][1] == stage})
    meta.update(extra)
    return meta


def _fmt_float(x, digits=4) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.{digits}f}"


# --- stages ---------------------------------------------------------------------

def stage_ingest(cfg) -> None:
    if not cfg["panel"]:
        raise ConfigError("ingest needs a panel file (panel = path)")
    books = data_model.read_lob(_need(cfg["panel"]))
    if not books:
        raise DataError("panel holds no rows")
    stocks = pipeline.ingest(books, cfg["jobs"], min_changes=cfg["min_changes"],
                             max_missing_run=cfg["max_missing_run"],
                             max_still_run=cfg["max_still_run"])
    mids, cal_rows = [], []
    tick = None
    for stock, sd in stocks.items():
        tick = sd.mids.tick
        s = profile_builder.raw_sparsity(sd.grid)
        mids.append(_grid_frame(stock, sd.mids.dates, {"mid": sd.mids.mid, "s": s}))
        for d in sd.calendar.sessions:
            cal_rows.append((stock, str(d.date), d.price_changes, d.max_missing_run,
                             d.max_still_run, int(d.admitted), d.reason))
    write_table(_path(cfg, "mids.csv"), pd.concat(mids, ignore_index=True),
                _meta(cfg, "ingest", tick=tick, mid_unit="ticks", s_unit="ticks"))
    cal = pd.DataFrame(cal_rows, columns=["stock", "date", "price_changes", "max_missing_run",
                                          "max_still_run", "admitted", "reason"])
    write_table(_path(cfg, "calendar.csv"), cal, _meta(cfg, "ingest"))
    log.info("ingest: %d stocks, %d of %d sessions admitted", len(stocks),
             int(cal["admitted"].sum()), len(cal))


def _load_mids(cfg) -> tuple[dict, float]:
    path = _need(_path(cfg, "mids.csv"))
    meta = read_meta(path)
    df, _ = read_table(path, dtype={"stock": str, "ts": str})
    tick = float(meta.get("tick", data_model.DEFAULT_TICK))
    return _frame_to_grids(df, ("mid", "s")), tick


def stage_detect(cfg) -> None:
    grids, tick = _load_mids(cfg)
    dcfg = detector_config(cfg)
    returns = {}
    for stock, (dates, cols) in grids.items():
        m = MidPriceSeries(stock, dates, cols["mid"], tick)
        returns[stock] = data_model.compute_returns(m)
    names = sorted(returns)
    dets = pipeline._map(lambda s: pipeline.detect_stock(returns[s], dcfg), names, cfg["jobs"])
    thr = dcfg.threshold
    score_frames, jump_rows = [], []
    for stock, det in zip(names, dets):
        sc = det.scores
        score_frames.append(_grid_frame(stock, sc.dates, {"r": sc.r, "sigma": sc.sigma, "J": sc.J}))
        for t, J in zip(det.times, det.J):
            jump_rows.append((stock, t, J, abs(J), thr))
    f_rows = [(stock, slot, det.scores.f[slot]) for stock, det in zip(names, dets)
              for slot in range(SESSION_MINUTES)]
    write_table(_path(cfg, "scores.csv"), pd.concat(score_frames, ignore_index=True),
                _meta(cfg, "detect", threshold=thr))
    write_table(_path(cfg, "periodicity.csv"), pd.DataFrame(f_rows, columns=["stock", "slot", "f"]),
                _meta(cfg, "detect"))
    jumps = pd.DataFrame(jump_rows, columns=["stock", "ts", "J", "abs_J", "threshold"])
    jumps["ts"] = fmt_minutes(jumps["ts"].to_numpy(dtype="datetime64[m]")) if len(jumps) else []
    write_table(_path(cfg, "jumps.csv"), jumps, _meta(cfg, "detect", threshold=thr))
    log.info("detect: %d jumps at threshold %.4f", len(jumps), thr)


def _read_news_times(cfg, universe) -> dict:
    if not cfg["news"]:
        return {}
    items = data_model.read_news(_need(cfg["news"]))
    return data_model.filter_news(items, set(universe))


def stage_cluster(cfg) -> None:
    jumps, _ = _read_jumps(cfg)
    dates = _read_admitted_dates(cfg)
    news = _read_news_times(cfg, dates.keys())
    ccfg = cluster_config(cfg)
    clusters = pipeline.cluster(jumps, dates, news, ccfg, pipeline.stage_rng(cfg["seed"], "cluster"))
    rows = [(c.cluster_id, c.stock, c.t_first, c.t_last, c.size, c.label, c.reason,
             c.kendall_tau, c.news_class, getattr(c, "overlaps", 0)) for c in clusters]
    df = pd.DataFrame(rows, columns=["cluster_id", "stock", "t_first", "t_last", "size", "label",
                                     "reason", "tau", "news_class", "overlaps"])
    if len(df):
        df["t_first"] = fmt_minutes(df["t_first"].to_numpy(dtype="datetime64[m]"))
        df["t_last"] = fmt_minutes(df["t_last"].to_numpy(dtype="datetime64[m]"))
    write_table(_path(cfg, "clusters.csv"), df,
                _meta(cfg, "cluster", news_file="yes" if cfg["news"] else "no"))
    members = [(c.cluster_id, c.stock, t, J) for c in clusters for t, J in zip(c.times, c.scores)]
    mem = pd.DataFrame(members, columns=["cluster_id", "stock", "ts", "J"])
    if len(mem):
        mem["ts"] = fmt_minutes(mem["ts"].to_numpy(dtype="datetime64[m]"))
    write_table(_path(cfg, "cluster_members.csv"), mem, _meta(cfg, "cluster"))
    log.info("cluster: %d clusters (%s)", len(df),
             ", ".join(f"{k}={v}" for k, v in df["label"].value_counts().sort_index().items())
             if len(df) else "none")


def _read_clusters(cfg) -> list:
    df, _ = read_table(_need(_path(cfg, "clusters.csv")),
                       dtype={"stock": str, "t_first": str, "t_last": str, "label": str,
                              "reason": str, "news_class": str})
    mem, _ = read_table(_need(_path(cfg, "cluster_members.csv")), dtype={"stock": str, "ts": str})
    by_id = {}
    if len(mem):
        ts = parse_minutes(mem["ts"])
        for cid, idx in mem.groupby("cluster_id", sort=False).indices.items():
            by_id[int(cid)] = (ts[idx], mem["J"].to_numpy(dtype=float)[idx])
    out = []
    for r in df.itertuples(index=False):
        times, J = by_id.get(int(r.cluster_id), (np.array([], "datetime64[m]"), np.array([])))
        if times.size == 0:
            times = parse_minutes([r.t_first])
            J = np.array([np.nan])
        out.append(JumpCluster(r.stock, times, J, r.news_class, r.label, r.reason, int(r.cluster_id)))
    return out


def _offset_columns(offsets) -> list:
    return [f"o{int(o)}" for o in offsets]


def stage_profile(cfg) -> None:
    grids, _ = _load_mids(cfg)
    sc, _ = read_table(_need(_path(cfg, "scores.csv")), dtype={"stock": str, "ts": str})
    score_grids = _frame_to_grids(sc, ("r", "sigma", "J"))
    jumps, _ = _read_jumps(cfg)
    clusters = _read_clusters(cfg)
    obs = {}
    for stock, (dates, cols) in score_grids.items():
        scores = JumpScoreSeries(stock, dates, cols["r"], cols["sigma"], np.ones(SESSION_MINUTES),
                                 cols["J"])
        mask = np.zeros(cols["J"].shape, dtype=bool)
        if stock in jumps:
            day, slot = split_timestamps(jumps[stock][0])
            row = np.searchsorted(dates, day)
            mask[row, slot] = True
        s = None
        if stock in grids:
            gd, gc = grids[stock]
            s = gc["s"] if np.array_equal(gd, dates) else None
        obs[stock] = profile_builder.build_observables(scores, mask, None, cfg["kappa"],
                                                       cfg["burn_in"], sparsity=s)
    panel = profile_builder.build_panel(obs, clusters, cfg["window"])
    stock_of = {c.cluster_id: c.stock for c in clusters}
    ocols = _offset_columns(panel.offsets)
    frames = []
    for name in profile_builder.OBSERVABLES:
        d = pd.DataFrame(panel.data[name], columns=ocols)
        d.insert(0, "observable", name)
        d.insert(0, "label", panel.labels.astype(str))
        d.insert(0, "stock", [stock_of[int(c)] for c in panel.cluster_ids])
        d.insert(0, "cluster_id", panel.cluster_ids)
        frames.append(d)
    win = pd.concat(frames, ignore_index=True).sort_values(["cluster_id", "observable"],
                                                           kind="stable")
    write_table(_path(cfg, "windows.csv"), win, _meta(cfg, "profile", offset_unit="minutes"))
    aggs = pipeline.aggregate_profiles(panel, cfg["boot"], cfg["band"], cfg["baseline"], cfg["fdr"],
                                       pipeline.stage_rng(cfg["seed"], "profile"))
    rows = []
    for label in sorted(aggs):
        for name in profile_builder.OBSERVABLES:
            a = aggs[label][name]
            for j, off in enumerate(a.offsets):
                rows.append((label, name, int(off), a.mean[j], a.lo[j], a.hi[j], int(a.n[j]),
                             a.p[j], a.p_adj[j], int(a.significant[j])))
    prof = pd.DataFrame(rows, columns=["label", "observable", "offset", "mean", "lo", "hi", "n",
                                       "p", "p_adj", "significant"])
    write_table(_path(cfg, "profiles.csv"), prof, _meta(cfg, "profile", offset_unit="minutes"))
    log.info("profile: %d windows (%s)", len(panel),
             ", ".join(f"{k}={int(np.sum(panel.labels == k))}" for k in (ENDO, EXO)))


def _read_windows(cfg, observable="abs_J") -> tuple[pd.DataFrame, np.ndarray, list]:
    win, _ = read_table(_need(_path(cfg, "windows.csv")),
                        dtype={"stock": str, "label": str, "observable": str})
    win = win[win["observable"] == observable].reset_index(drop=True)
    ocols = [c for c in win.columns if c.startswith("o") and c[1:].lstrip("-").isdigit()]
    offsets = np.array([int(c[1:]) for c in ocols])
    return win, offsets, ocols


FIT_COLUMNS = ["cluster_id", "stock", "label", "size", "N_l", "N_r", "p_l", "p_r", "d", "t_c",
               "A", "A_l", "A_r", "err_N_l", "err_N_r", "err_p_l", "err_p_r", "err_d", "sw_p",
               "rss", "converged", "kept"]


def _fit_row(fit, asym):
    se = fit.se
    return [fit.N_l, fit.N_r, fit.p_l, fit.p_r, fit.d, fit.t_c, asym.A, asym.A_l, asym.A_r,
            se.get("N_l", np.nan), se.get("N_r", np.nan), se.get("p_l", np.nan),
            se.get("p_r", np.nan), se.get("d", np.nan), fit.sw_p, fit.rss, int(fit.converged)]


def stage_fit(cfg) -> None:
    win, offsets, ocols = _read_windows(cfg)
    clusters, _ = read_table(_need(_path(cfg, "clusters.csv")), dtype={"stock": str})
    sizes = dict(zip(clusters["cluster_id"].astype(int), clusters["size"].astype(int)))
    panel = profile_builder.ProfilePanel(offsets, {"abs_J": win[ocols].to_numpy(dtype=float)},
                                         win["label"].to_numpy(dtype=object),
                                         win["cluster_id"].to_numpy(dtype=int))
    stocks = dict(zip(win["cluster_id"].astype(int), win["stock"]))
    records = pipeline.fit_panel(panel, sizes, cfg["method"], cfg["min_size"], cfg["grid"],
                                 cfg["max_rel_err"], stocks)
    rows = [[r.cluster_id, r.stock, r.label, r.size] + _fit_row(r.fit, r.asym) + [int(r.kept)]
            for r in records]
    write_table(_path(cfg, "fits.csv"), pd.DataFrame(rows, columns=FIT_COLUMNS),
                _meta(cfg, "fit", err_unit="standard error"))
    # per-class fits of the aggregate |J| profiles
    crow = []
    prof_path = _path(cfg, "profiles.csv")
    if os.path.exists(prof_path):
        prof, _ = read_table(prof_path, dtype={"label": str, "observable": str})
        prof = prof[prof["observable"] == "abs_J"]
        t_min, t_max = int(offsets[0]), int(offsets[-1])
        for label, grp in prof.groupby("label", sort=True):
            try:
                if cfg["method"] == "direct":
                    fit = powerlaw.fit_direct(grp["mean"].to_numpy(), grp["offset"].to_numpy())
                else:
                    fit = powerlaw.fit_closed_form(grp["mean"].to_numpy(), grp["offset"].to_numpy(),
                                                   grid_step=cfg["grid"])
            except ValueError as exc:
                log.warning("class %s aggregate fit failed: %s", label, exc)
                continue
            asym = powerlaw.asymmetry(fit, t_min, t_max)
            n_kept = sum(1 for r in records if r.label == label and r.kept)
            crow.append([label, n_kept] + _fit_row(fit, asym)
                        + [int(powerlaw.passes_quality(fit, cfg["max_rel_err"]))])
    cols = ["label", "n_fits"] + FIT_COLUMNS[4:]
    write_table(_path(cfg, "class_fits.csv"), pd.DataFrame(crow, columns=cols),
                _meta(cfg, "fit", source="aggregate abs_J profile"))
    log.info("fit: %d fitted, %d kept", len(records), sum(r.kept for r in records))


def stage_classify(cfg) -> None:
    fits, _ = read_table(_need(_path(cfg, "fits.csv")), dtype={"stock": str, "label": str})
    fits = fits[fits["kept"].astype(int) == 1].sort_values("cluster_id", kind="stable")
    win, _, ocols = _read_windows(cfg)
    raw_by_id = dict(zip(win["cluster_id"].astype(int), win[ocols].to_numpy(dtype=float)))
    X = fits[["p_l", "p_r", "A"]].to_numpy(dtype=float)
    y = (fits["label"] == EXO).to_numpy().astype(int)
    raw = np.array([raw_by_id[int(c)] for c in fits["cluster_id"]]).reshape(len(fits), len(ocols))
    links = [x.strip() for x in cfg["link"].split(",") if x.strip()]
    res = pipeline.classify_arrays(X, y, raw, links, cfg["splits"], cfg["test_frac"],
                                   parse_range(cfg["knn_k"]), cfg["ari_boot"], cfg["ari_band"],
                                   cfg["abs_a"], pipeline.stage_rng(cfg["seed"], "classify"))
    rows = []
    for link, m in res.models.items():
        for (term, coef, se), z in zip(m.table(), m.z):
            rows.append((link, term, coef, se, z))
        o = res.oos[link]
        for term, val in (("auc", m.auc), ("oos_auc_mean", o.mean), ("oos_auc_sd", o.sd),
                          ("pseudo_r2_adj", m.pseudo_r2_adj), ("n", m.n),
                          ("separation", int(m.separation)), ("converged", int(m.converged))):
            rows.append((link, term, val, np.nan, np.nan))
    extra = {"n_endo": res.n_endo, "n_exo": res.n_exo}
    if res.notice:
        extra["notice"] = res.notice
    write_table(_path(cfg, "regression.csv"),
                pd.DataFrame(rows, columns=["link", "term", "value", "se", "z"]),
                _meta(cfg, "classify", **extra))
    arows = []
    for mode, c in res.ari.items():
        for j, K in enumerate(c.K):
            arows.append((mode, int(K), c.mean[j], c.lo[j], c.hi[j], c.sd[j]))
    write_table(_path(cfg, "ari.csv"),
                pd.DataFrame(arows, columns=["mode", "K", "mean", "lo", "hi", "sd"]),
                _meta(cfg, "classify", **extra))
    log.info("classify: %d ENDO, %d EXO%s", res.n_endo, res.n_exo,
             f" ({res.notice})" if res.notice else "")


def stage_simulate(cfg) -> None:
    sessions = cfg["sessions"]
    if cfg["horizon"] > 0:
        sessions = max(1, int(round(cfg["horizon"] / SESSION_MINUTES)))
    params = hawkes_sim.HawkesParams(cfg["theta"], cfg["n"], cfg["lambda0"], cfg["tau0"],
                                     float(sessions * SESSION_MINUTES), cfg["seed"])
    pcfg = hawkes_sim.PanelConfig(
        n_stocks=cfg["stocks"], n_sessions=sessions, start_date=cfg["start_date"],
        shocks_per_session=cfg["shock_rate"], shock_size=cfg["shock_size"], sigma0=cfg["sigma0"],
        nu=cfg["nu"], vol_exponent=cfg["vol_exponent"], seasonality=cfg["seasonality"],
        noise=cfg["noise"] if cfg["noise"] > 0 else None, burn_in=cfg["sim_burn_in"],
        news_noise_per_session=cfg["news_noise"])
    panel = hawkes_sim.simulate_panel(params, pcfg, cfg["seed"])
    panel_path = cfg["panel"] or _path(cfg, "panel.csv")
    news_path = cfg["news"] or _path(cfg, "news.csv")
    data_model.write_lob(panel_path, [panel.books[s] for s in sorted(panel.books)], pcfg.tick)
    data_model.write_news(news_path, panel.news)
    rows = [(s, t) for s in sorted(panel.shocks) for t in fmt_minutes(panel.shocks[s])]
    write_table(_path(cfg, "shocks.csv"), pd.DataFrame(rows, columns=["stock", "ts"]),
                _meta(cfg, "simulate"))
    log.info("simulate: %d stocks x %d sessions, %d shocks -> %s, %s", pcfg.n_stocks, sessions,
             len(rows), panel_path, news_path)


# --- report ---------------------------------------------------------------------

def _try_read(path, **kw):
    if not os.path.exists(path):
        return None, None
    return read_table(path, **kw)


def build_report(out_dir) -> tuple[str, pd.DataFrame]:
    p = lambda name: os.path.join(out_dir, name)  # noqa: E731
    lines, summary = [], []

    def put(key, value):
        summary.append((key, value))

    lines.append("jumplab run report")
    lines.append("")
    cal, _ = _try_read(p("calendar.csv"), dtype={"stock": str})
    jumps, _ = _try_read(p("jumps.csv"), dtype={"stock": str})
    lines.append("[census]")
    if cal is None:
        lines.append("  ingest output absent")
    else:
        n_adm = int(cal["admitted"].sum())
        lines.append(f"  stocks: {cal['stock'].nunique()}")
        lines.append(f"  sessions admitted: {n_adm} of {len(cal)}")
        put("stocks", cal["stock"].nunique())
        put("sessions_admitted", n_adm)
        put("sessions_total", len(cal))
    if jumps is None:
        lines.append("  detect output absent")
    else:
        lines.append(f"  jumps: {len(jumps)}")
        put("jumps", len(jumps))
    cl, cmeta = _try_read(p("clusters.csv"), dtype={"stock": str, "label": str, "reason": str})
    if cl is None:
        lines.append("  cluster output absent")
    else:
        lines.append(f"  clusters: {len(cl)}")
        put("clusters", len(cl))
        for label in (ENDO, EXO, DISCARDED):
            k = int((cl["label"] == label).sum())
            lines.append(f"    {label}: {k}")
            put(f"clusters_{label}", k)
        for reason, k in cl.loc[cl["label"] == DISCARDED, "reason"].value_counts().sort_index().items():
            lines.append(f"      discarded {reason}: {k}")
            put(f"discarded_{reason}", int(k))
        if cmeta.get("news_file") == "no":
            lines.append("  no news file: every kept cluster is ENDO")
    fits, _ = _try_read(p("fits.csv"), dtype={"stock": str, "label": str})
    if fits is not None:
        for label in (ENDO, EXO):
            sub = fits[fits["label"] == label]
            k = int(sub["kept"].astype(int).sum())
            lines.append(f"  fits {label}: {len(sub)} fitted, {k} kept")
            put(f"fits_{label}", len(sub))
            put(f"fits_kept_{label}", k)
    lines.append("")
    lines.append("[exponents]")
    cf, _ = _try_read(p("class_fits.csv"), dtype={"label": str})
    if cf is None:
        lines.append("  fit output absent")
    elif cf.empty:
        lines.append("  no class profile was fitted")
    else:
        lines.append("  class  p_l (se)            p_r (se)            A")
        for r in cf.itertuples(index=False):
            lines.append(f"  {r.label:<5}  {_fmt_float(r.p_l)} ({_fmt_float(r.err_p_l)})"
                         f"   {_fmt_float(r.p_r)} ({_fmt_float(r.err_p_r)})   {_fmt_float(r.A)}")
            put(f"p_l_{r.label}", r.p_l)
            put(f"p_r_{r.label}", r.p_r)
            put(f"A_{r.label}", r.A)
    if fits is not None and len(fits):
        kept = fits[fits["kept"].astype(int) == 1]
        for label in (ENDO, EXO):
            sub = kept[kept["label"] == label]
            if len(sub):
                lines.append(f"  {label} median of individual fits: p_l {_fmt_float(sub['p_l'].median())}"
                             f", p_r {_fmt_float(sub['p_r'].median())}, A {_fmt_float(sub['A'].median())}")
    lines.append("")
    lines.append("[regression]")
    reg, rmeta = _try_read(p("regression.csv"), dtype={"link": str, "term": str})
    if reg is None:
        lines.append("  classify output absent")
    elif rmeta.get("notice"):
        lines.append(f"  {rmeta['notice']}")
        put("regression", "skipped")
    else:
        for link, grp in reg.groupby("link", sort=True):
            vals = dict(zip(grp["term"], grp["value"]))
            lines.append(f"  {link}:")
            lines.append("    term        coef      se        z")
            for r in grp.itertuples(index=False):
                if r.term in ("p_l", "p_r", "A", "intercept"):
                    lines.append(f"    {r.term:<10}{r.value:>9.3f} {r.se:>9.3f} {r.z:>8.2f}")
                    put(f"{link}_{r.term}", r.value)
            lines.append(f"    AUC {vals['auc']:.2f}")
            lines.append(f"    out-of-sample AUC {vals['oos_auc_mean']:.2f}"
                         f" (sd {vals['oos_auc_sd']:.2f})")
            lines.append(f"    adjusted pseudo-R2 {vals['pseudo_r2_adj']:.3f}, n = {int(vals['n'])}")
            if int(vals.get("separation", 0)):
                lines.append("    separation detected")
            put(f"{link}_auc", round(float(vals["auc"]), 2))
            put(f"{link}_oos_auc", round(float(vals["oos_auc_mean"]), 2))
    lines.append("")
    lines.append("[ari]")
    ari, _ = _try_read(p("ari.csv"), dtype={"mode": str})
    if ari is None:
        lines.append("  classify output absent")
    elif ari.empty:
        lines.append("  no ARI curve (classification skipped)")
    else:
        wide = ari.pivot(index="K", columns="mode", values="mean").sort_index()
        modes = list(wide.columns)
        lines.append("  K    " + "  ".join(f"{m:>10}" for m in modes))
        for K, row in wide.iterrows():
            lines.append(f"  {int(K):<4} " + "  ".join(f"{row[m]:>10.3f}" for m in modes))
    text = "\n".join(lines) + "\n"
    return text, pd.DataFrame(summary, columns=["key", "value"])


def stage_report(cfg) -> None:
    text, summary = build_report(cfg["out"])
    with open(_path(cfg, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    write_table(_path(cfg, "summary.csv"), summary, {"stage": "report"})
    sys.stdout.write(text)


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "detect": stage_detect,
    "cluster": stage_cluster,
    "profile": stage_profile,
    "fit": stage_fit,
    "classify": stage_classify,
    "report": stage_report,
    "simulate": stage_simulate,
}


# --- entry point ----------------------------------------------------------------

FLAG_HELP = {
    "k": "bipower window in minutes",
    "alpha": "Gumbel significance level",
    "edge": "minutes excluded at each session edge",
    "eps": "cluster significance level",
    "news_window": "EXO window around the news start, lo:hi minutes (use --news-window=-1:4)",
    "mw_threshold": "distinct other stocks overlapping a market-wide cluster",
    "contamination": "minimum gap in minutes to a neighbouring kept cluster",
    "mw_null": "none or shuffle",
    "kappa": "EMA weight",
    "window": "window width W in minutes",
    "boot": "bootstrap resamples",
    "band": "two-sided band level",
    "method": "direct or closed",
    "grid": "t_c grid step of the closed-form fit",
    "link": "logit, probit or logit,probit",
    "splits": "train/test repetitions",
    "knn_k": "K values, e.g. 1..40 or 5,10",
    "horizon": "simulated minutes; overrides sessions when > 0",
    "stocks": "number of simulated stocks",
    "noise": "log-normal magnitude dispersion, 0 for Gaussian returns",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumplab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"jumplab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, stages in COMMAND_STAGES.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="flat key = value config file")
        keys = [k for k, (_, st) in DEFAULTS.items() if st == "general" or st in stages]
        if command == "run":
            keys = list(DEFAULTS)
        for key in keys:
            default = DEFAULTS[key][0]
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, metavar=type(default).__name__.upper(),
                           help=FLAG_HELP.get(key, f"default {default!r}"))
    return parser


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def run_stages(cfg: dict, stages) -> int:
    """Run ``stages`` in order; a failure leaves a FAILED marker and earlier outputs."""
    marker = _path(cfg, FAILED_MARKER)
    if os.path.exists(marker):
        os.remove(marker)
    for stage in stages:
        log.debug("stage %s", stage)
        try:
            STAGE_FUNCS[stage](cfg)
        except ConfigError as exc:
            log.error("%s: configuration error: %s", stage, exc)
            _mark_failed(marker, stage, exc)
            return EXIT_CONFIG
        except (DataError, InputFormatError) as exc:
            log.error("%s: data error: %s", stage, exc)
            _mark_failed(marker, stage, exc)
            return EXIT_DATA
        except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
            log.error("%s failed: %s", stage, exc)
            log.debug("%s", traceback.format_exc())
            _mark_failed(marker, stage, exc)
            return EXIT_STAGE
    return EXIT_OK


def _mark_failed(path, stage, exc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"stage = {stage}\nerror = {type(exc).__name__}: {exc}\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    try:
        cfg = resolve_config(args.config, flags)
    except JumplabError as exc:
        sys.stderr.write(f"jumplab: configuration error: {exc}\n")
        return EXIT_CONFIG
    _setup_logging(cfg["log_level"])
    os.makedirs(cfg["out"], exist_ok=True)
    write_manifest(cfg["out"], args.command, cfg)
    stages = list(COMMAND_STAGES[args.command])
    if args.command == "report":
        stages = ["report"]
    elif args.command == "run":
        if not cfg["panel"]:
            sys.stderr.write("jumplab: run needs panel = path\n")
            return EXIT_CONFIG
        stages.append("report")
    return run_stages(cfg, stages)


if __name__ == "__main__":
    sys.exit(main())
