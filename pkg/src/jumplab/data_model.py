"""Order-book ingestion, session admission and gap-aware log-returns.

All per-minute series live on a fixed grid of 390 regular-session minutes
(09:30 to 15:59 stamps) per admitted session, stored as ``(n_sessions, 390)``
arrays with NaN marking MISSING. Prices are kept as integer multiples of the
tick (held in float arrays so NaN can mark gaps); level-ordering checks are
therefore exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np
import pandas as pd

from .errors import DataError, InputFormatError
from .tables import fmt_minutes, parse_minutes, read_table, write_table

SESSION_MINUTES = 390
SESSION_OPEN = np.timedelta64(9 * 60 + 30, "m")
DEFAULT_TICK = 0.01

LOB_COLUMNS = ["bid1", "bidv1", "bid2", "bidv2", "ask1", "askv1", "ask2", "askv2"]
_PRICE_COLUMNS = ["bid1", "bid2", "ask1", "ask2"]
_VOLUME_COLUMNS = ["bidv1", "bidv2", "askv1", "askv2"]


@dataclass(frozen=True)
class LobSnapshot:
    """One minute of the two best levels on each side, in currency units."""

    timestamp: np.datetime64
    bid_price_1: float | None = None
    bid_vol_1: float | None = None
    bid_price_2: float | None = None
    bid_vol_2: float | None = None
    ask_price_1: float | None = None
    ask_vol_1: float | None = None
    ask_price_2: float | None = None
    ask_vol_2: float | None = None
    tick_size: float = DEFAULT_TICK

    def __post_init__(self):
        if self.tick_size <= 0:
            raise DataError("tick size must be positive")
        for name in ("bid_vol_1", "bid_vol_2", "ask_vol_1", "ask_vol_2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise DataError(f"{name} is negative")

    def is_ordered(self) -> bool:
        levels = [self.bid_price_2, self.bid_price_1, self.ask_price_1, self.ask_price_2]
        present = [p for p in levels if p is not None]
        return all(a < b for a, b in zip(present, present[1:]))


@dataclass
class LobSnapshots:
    """Columnar snapshots of one stock. Prices in ticks, NaN = missing."""

    stock: str
    ts: np.ndarray
    bid1: np.ndarray
    bidv1: np.ndarray
    bid2: np.ndarray
    bidv2: np.ndarray
    ask1: np.ndarray
    askv1: np.ndarray
    ask2: np.ndarray
    askv2: np.ndarray
    tick: float = DEFAULT_TICK

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype="datetime64[m]")
        for name in LOB_COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def __len__(self):
        return self.ts.size

    def row(self, i: int) -> LobSnapshot:
        def price(a):
            v = a[i]
            return None if np.isnan(v) else float(v) * self.tick

        def vol(a):
            v = a[i]
            return None if np.isnan(v) else float(v)

        return LobSnapshot(self.ts[i], price(self.bid1), vol(self.bidv1), price(self.bid2),
                           vol(self.bidv2), price(self.ask1), vol(self.askv1),
                           price(self.ask2), vol(self.askv2), self.tick)

    @classmethod
    def from_rows(cls, stock: str, rows, tick: float = DEFAULT_TICK) -> "LobSnapshots":
        rows = list(rows)

        def col(attr, is_price):
            out = np.full(len(rows), np.nan)
            for i, r in enumerate(rows):
                v = getattr(r, attr)
                if v is not None:
                    out[i] = round(v / tick) if is_price else v
            return out

        return cls(
            stock=stock,
            ts=np.array([r.timestamp for r in rows], dtype="datetime64[m]"),
            bid1=col("bid_price_1", True), bidv1=col("bid_vol_1", False),
            bid2=col("bid_price_2", True), bidv2=col("bid_vol_2", False),
            ask1=col("ask_price_1", True), askv1=col("ask_vol_1", False),
            ask2=col("ask_price_2", True), askv2=col("ask_vol_2", False),
            tick=tick,
        )


@dataclass
class SessionGrid:
    """LOB columns laid out on the (session, minute-slot) grid."""

    stock: str
    dates: np.ndarray
    cols: dict
    tick: float

    def __getitem__(self, name):
        return self.cols[name]

    def take(self, mask) -> "SessionGrid":
        return SessionGrid(self.stock, self.dates[mask],
                           {k: v[mask] for k, v in self.cols.items()}, self.tick)


@dataclass
class MidPriceSeries:
    stock: str
    dates: np.ndarray  # datetime64[D], one per session
    mid: np.ndarray  # (n_sessions, 390) in ticks, NaN = MISSING
    tick: float = DEFAULT_TICK

    @property
    def prices(self) -> np.ndarray:
        return self.mid * self.tick

    def timestamps(self) -> np.ndarray:
        return session_timestamps(self.dates)

    def take(self, mask) -> "MidPriceSeries":
        return MidPriceSeries(self.stock, self.dates[mask], self.mid[mask], self.tick)


@dataclass
class ReturnSeries:
    stock: str
    dates: np.ndarray
    r: np.ndarray  # (n_sessions, 390), NaN = MISSING
    gap_scaled: np.ndarray  # bool, True where the return bridges a missing run

    def timestamps(self) -> np.ndarray:
        return session_timestamps(self.dates)


@dataclass(frozen=True)
class NewsItem:
    timestamp: np.datetime64
    tickers: frozenset
    title_match: bool


@dataclass
class SessionDiagnostic:
    date: np.datetime64
    price_changes: int
    max_missing_run: int
    max_still_run: int
    admitted: bool
    reason: str = ""


@dataclass
class SessionCalendar:
    stock: str
    sessions: list = field(default_factory=list)

    @property
    def admitted_dates(self) -> np.ndarray:
        return np.array([s.date for s in self.sessions if s.admitted], dtype="datetime64[D]")

    @property
    def admitted_mask(self) -> np.ndarray:
        return np.array([s.admitted for s in self.sessions], dtype=bool)


def session_timestamps(dates) -> np.ndarray:
    dates = np.asarray(dates, dtype="datetime64[D]")
    base = dates.astype("datetime64[m]") + SESSION_OPEN
    return base[:, None] + np.arange(SESSION_MINUTES).astype("timedelta64[m]")


def split_timestamps(ts) -> tuple[np.ndarray, np.ndarray]:
    """Return (date, slot) for minute timestamps; slot may fall outside [0, 390)."""
    ts = np.asarray(ts, dtype="datetime64[m]")
    day = ts.astype("datetime64[D]")
    slot = ((ts - day.astype("datetime64[m]")) - SESSION_OPEN).astype(int)
    return day, slot


def _check_sorted(ts, what="timestamps"):
    if ts.size > 1:
        d = np.diff(ts.astype(np.int64))
        if np.any(d <= 0):
            kind = "duplicate" if np.any(d == 0) else "unsorted"
            raise InputFormatError(f"{kind} {what}")


def to_grid(snapshots: LobSnapshots) -> SessionGrid:
    _check_sorted(snapshots.ts)
    day, slot = split_timestamps(snapshots.ts)
    keep = (slot >= 0) & (slot < SESSION_MINUTES)
    day, slot = day[keep], slot[keep]
    dates, row = np.unique(day, return_inverse=True)
    cols = {}
    for name in LOB_COLUMNS:
        g = np.full((dates.size, SESSION_MINUTES), np.nan)
        g[row, slot] = getattr(snapshots, name)[keep]
        cols[name] = g
    return SessionGrid(snapshots.stock, dates, cols, snapshots.tick)


def _ffill_rows(a: np.ndarray) -> np.ndarray:
    n, m = a.shape
    idx = np.where(np.isfinite(a), np.arange(m)[None, :], -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    out = a[np.arange(n)[:, None], np.maximum(idx, 0)]
    out[idx < 0] = np.nan
    return out


def mid_from_grid(grid: SessionGrid) -> MidPriceSeries:
    bid_raw, ask_raw = grid["bid1"], grid["ask1"]
    bid = _ffill_rows(bid_raw)
    ask = _ffill_rows(ask_raw)
    bid2, ask2 = grid["bid2"], grid["ask2"]
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(bid) & np.isfinite(ask) & (bid < ask)
        ok &= ~(np.isfinite(bid2) & (bid2 >= bid))
        ok &= ~(np.isfinite(ask2) & (ask2 <= ask))
    ok &= ~(np.isnan(bid_raw) & np.isnan(ask_raw))
    mid = np.where(ok, 0.5 * (bid + ask), np.nan)
    return MidPriceSeries(grid.stock, grid.dates, mid, grid.tick)


def build_mid_price(snapshots: LobSnapshots) -> MidPriceSeries:
    """Mid-prices on the session grid.

    Missing best quotes are forward-filled within the session. A minute gets a
    MISSING mid when both best quotes are absent, when no earlier quote exists
    to fill from, or when the (filled) levels are not strictly ordered
    ``bid2 < bid1 < ask1 < ask2``.
    """
    return mid_from_grid(to_grid(snapshots))


def _log_returns(mid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = mid.shape
    r = np.full((n, m), np.nan)
    gap_scaled = np.zeros((n, m), dtype=bool)
    for i in range(n):
        idx = np.flatnonzero(np.isfinite(mid[i]))
        if idx.size < 2:
            continue
        gap = np.diff(idx)
        cur, prev = idx[1:], idx[:-1]
        r[i, cur] = np.log(mid[i, cur] / mid[i, prev]) / np.sqrt(gap)
        gap_scaled[i, cur] = gap > 1
    return r, gap_scaled


def _check_positive(mid):
    with np.errstate(invalid="ignore"):
        if np.any(mid <= 0):
            raise DataError("non-positive mid-price")


def compute_returns(mids: MidPriceSeries) -> ReturnSeries:
    """Log-returns with gap rescaling.

    The first return after a run of ``g - 1`` missing mids spans ``g`` minutes
    and is divided by ``sqrt(g)``. The opening minute of every session has a
    MISSING return, so no overnight move ever enters.
    """
    _check_positive(mids.mid)
    r, gap = _log_returns(mids.mid)
    return ReturnSeries(mids.stock, mids.dates, r, gap)


def _max_run(mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape[0], dtype=int)
    for i, row in enumerate(mask):
        if not row.any():
            continue
        padded = np.concatenate(([0], row.astype(np.int8), [0]))
        d = np.diff(padded)
        out[i] = int((np.flatnonzero(d == -1) - np.flatnonzero(d == 1)).max())
    return out


def filter_sessions(series: MidPriceSeries, min_changes: int = 300, max_missing_run: int = 25,
                    max_still_run: int = 25) -> SessionCalendar:
    """Admit sessions with enough activity and no long dead or missing stretches.

    A minute "records a price movement" when its return is non-zero and not
    MISSING; the still-run is the longest stretch of minutes without one.
    """
    _check_positive(series.mid)
    r, _ = _log_returns(series.mid)
    moved = np.isfinite(r) & (r != 0)
    changes = moved.sum(axis=1)
    miss_run = _max_run(~np.isfinite(series.mid))
    still_run = _max_run(~moved)
    cal = SessionCalendar(series.stock)
    for i, d in enumerate(series.dates):
        reasons = []
        if not np.isfinite(series.mid[i]).any():
            reasons.append("empty")
        if changes[i] < min_changes:
            reasons.append("few_changes")
        if miss_run[i] > max_missing_run:
            reasons.append("missing_run")
        if still_run[i] > max_still_run:
            reasons.append("still_run")
        cal.sessions.append(SessionDiagnostic(d, int(changes[i]), int(miss_run[i]),
                                              int(still_run[i]), not reasons, ";".join(reasons)))
    return cal


def admitted(series: MidPriceSeries, calendar: SessionCalendar) -> MidPriceSeries:
    return series.take(np.isin(series.dates, calendar.admitted_dates))


def filter_news(items, universe=None) -> dict:
    """Title-matched news times per in-universe ticker, sorted."""
    per = {}
    for item in items:
        if not item.title_match:
            continue
        for tk in item.tickers:
            if universe is None or tk in universe:
                per.setdefault(tk, []).append(item.timestamp)
    return {k: np.sort(np.array(v, dtype="datetime64[m]")) for k, v in per.items()}


# ---------------------------------------------------------------- file formats

def _decimals(tick: float) -> int:
    return max(0, -Decimal(str(tick)).normalize().as_tuple().exponent)


def write_lob(path, books, tick: float = DEFAULT_TICK) -> None:
    dec = _decimals(tick)
    frames = []
    for b in books:
        d = {"stock": np.full(len(b), b.stock, dtype=object), "ts": fmt_minutes(b.ts)}
        for name in LOB_COLUMNS:
            a = getattr(b, name)
            if name in _PRICE_COLUMNS:
                d[name] = np.round(a * tick, dec)
            else:
                d[name] = pd.array(np.where(np.isfinite(a), a, 0).astype(np.int64),
                                   dtype="Int64")
                d[name][~np.isfinite(a)] = pd.NA
        frames.append(pd.DataFrame(d))
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["stock", "ts"] + LOB_COLUMNS)
    meta = {"format": "lob-minute", "tick": tick, "price_unit": "currency",
            "volume_unit": "shares"}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        df.to_csv(fh, index=False, float_format=f"%.{dec}f", na_rep="", lineterminator="\n")


def read_lob(path, tick: float | None = None) -> dict:
    df, meta = read_table(path, dtype={"stock": str, "ts": str})
    missing_cols = {"stock", "ts", *LOB_COLUMNS} - set(df.columns)
    if missing_cols:
        raise InputFormatError(f"missing columns: {sorted(missing_cols)}")
    if tick is None:
        tick = float(meta.get("tick", DEFAULT_TICK))
    ts = parse_minutes(df["ts"])
    books = {}
    stocks = df["stock"].to_numpy()
    for stock in pd.unique(stocks):
        sel = stocks == stock
        cols = {}
        for name in LOB_COLUMNS:
            v = df[name].to_numpy(dtype=float)[sel]
            cols[name] = np.rint(v / tick) if name in _PRICE_COLUMNS else v
        book = LobSnapshots(stock=str(stock), ts=ts[sel], tick=tick, **cols)
        _check_sorted(book.ts)
        books[str(stock)] = book
    return books


def write_news(path, items) -> None:
    df = pd.DataFrame({
        "ts": fmt_minutes(np.array([i.timestamp for i in items], dtype="datetime64[m]")),
        "tickers": [";".join(sorted(i.tickers)) for i in items],
        "title_match": [int(i.title_match) for i in items],
    })
    write_table(path, df, {"format": "news"})


def read_news(path) -> list:
    df, _ = read_table(path, dtype={"ts": str, "tickers": str})
    if df.empty:
        return []
    ts = parse_minutes(df["ts"])
    return [NewsItem(t, frozenset(x for x in str(tk).split(";") if x), bool(int(m)))
            for t, tk, m in zip(ts, df["tickers"], df["title_match"])]
