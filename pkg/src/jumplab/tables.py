"""Delimited text tables with a ``#`` metadata preamble.

Every stage table is comma separated with one header row. Lines starting with
``#`` before the header carry ``key: value`` metadata (units, parameters).
Floats are written with 17 significant digits so that a write/read cycle is
lossless and reruns are byte-identical.
"""

from __future__ import annotations

import io
import os

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.17g"


def write_table(path, df: pd.DataFrame, meta: dict | None = None) -> None:
    buf = io.StringIO()
    for key, value in (meta or {}).items():
        buf.write(f"# {key}: {value}\n")
    df.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_meta(path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
    return meta


def read_table(path, dtype=None) -> tuple[pd.DataFrame, dict]:
    meta = read_meta(path)
    df = pd.read_csv(path, comment="#", dtype=dtype, keep_default_na=False,
                     na_values=[""])
    return df, meta


def fmt_minutes(ts: np.ndarray) -> np.ndarray:
    """Format ``datetime64[m]`` values as ``YYYY-MM-DD HH:MM``."""
    out = np.datetime_as_string(np.asarray(ts, dtype="datetime64[m]"), unit="m")
    return np.char.replace(out, "T", " ")


def parse_minutes(values) -> np.ndarray:
    s = pd.to_datetime(pd.Series(values, dtype=str), format="%Y-%m-%d %H:%M")
    return s.to_numpy().astype("datetime64[m]")
