"""Small shared helpers: input validation, thread pool, CSV writing."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from sklearn.utils import check_array

FLOAT_FORMAT = "%.12g"


class InsufficientData(ValueError):
    """Too few observations or firms for an estimate."""


class InsufficientOverlap(InsufficientData):
    """Two series share too few dates."""


def as_matrix(X, *, allow_nan=True, min_samples=1, min_features=1) -> np.ndarray:
    """2-D float array; NaN passes through when ``allow_nan``."""
    return check_array(
        X, dtype=np.float64, ensure_all_finite="allow-nan" if allow_nan else True,
        ensure_min_samples=min_samples, ensure_min_features=min_features,
    )


def n_threads() -> int:
    """Worker count from ``FEARFACTOR_THREADS`` (default 1)."""
    raw = os.environ.get("FEARFACTOR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn, items, chunk=64):
    """``list(map(fn, items))`` over a thread pool, results in input order."""
    items = list(items)
    threads = n_threads()
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def write_csv(df: pd.DataFrame, path, **kw) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n",
              date_format="%Y-%m-%d", **kw)


def month_ends(dates) -> pd.DatetimeIndex:
    """Last observed trading date of every calendar month in ``dates``."""
    idx = pd.DatetimeIndex(dates).sort_values().unique()
    s = pd.Series(idx, index=idx)
    return pd.DatetimeIndex(s.groupby(idx.to_period("M")).max().to_numpy())
