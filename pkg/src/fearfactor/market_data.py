"""Option and equity ingestion, quote filtering and parity-implied forwards.

Quotes travel as column arrays: a raw file is loaded into a
:class:`pandas.DataFrame` with one row per quote, and a single
(underlying, date, expiry) group becomes an :class:`OptionChain` whose
fields are aligned numpy arrays sorted by strike.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

OPTION_COLUMNS = [
    "underlying_id", "quote_date", "expiry_date", "strike", "right", "bid",
    "ask", "volume", "open_interest", "implied_vol", "delta",
]
STOCK_COLUMNS = ["stock_id", "date", "return", "price", "market_cap", "volume"]
RATE_COLUMNS = ["date", "rate"]

MIN_QUOTES = 4
MIN_DAYS, MAX_DAYS = 23, 37
TARGET_DAYS = 30
DAYS_PER_YEAR = 365.0


class ParseError(ValueError):
    """Raised for unreadable input files (missing header, missing file)."""


class NoStraddle(ValueError):
    """No strike carries both a call and a put mid-price."""


@dataclass(frozen=True)
class RowError:
    line: int
    column: str
    reason: str

    def __str__(self):
        return f"line {self.line}, column {self.column!r}: {self.reason}"


class Right(str, Enum):
    CALL = "call"
    PUT = "put"


@dataclass(frozen=True)
class OptionQuote:
    underlying_id: str
    quote_date: dt.date
    expiry_date: dt.date
    strike: float
    right: Right
    bid: float
    ask: float
    volume: float
    open_interest: float
    implied_vol: float | None = None
    delta: float | None = None

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


@dataclass(frozen=True)
class StockRecord:
    stock_id: str
    date: dt.date
    excess_return: float
    price: float
    market_cap: float
    volume: float


@dataclass(frozen=True)
class ChainMeta:
    underlying_id: str
    quote_date: dt.date
    expiry_date: dt.date
    spot: float
    risk_free_rate: float

    @property
    def days_to_expiry(self) -> int:
        return (self.expiry_date - self.quote_date).days


def _as_float_array(values) -> np.ndarray:
    return np.asarray(values, dtype=float)


@dataclass(frozen=True, eq=False)
class OptionChain:
    """One day's quotes for one underlying at one expiry.

    Quote fields are stored column-wise; ``is_call`` encodes the right.
    ``forward`` and ``k0`` are set once the chain has passed
    :func:`filter_chain`, which needs them to classify in-the-money quotes.
    """

    underlying_id: str
    quote_date: dt.date
    expiry_date: dt.date
    spot: float
    risk_free_rate: float
    strike: np.ndarray
    is_call: np.ndarray
    bid: np.ndarray
    ask: np.ndarray
    volume: np.ndarray
    open_interest: np.ndarray
    implied_vol: np.ndarray
    delta: np.ndarray
    forward: float | None = None
    k0: float | None = None

    def __post_init__(self):
        n = len(self.strike)
        for name in ("is_call", "bid", "ask", "volume", "open_interest",
                     "implied_vol", "delta"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has length "
                                 f"{len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.strike)

    @property
    def meta(self) -> ChainMeta:
        return ChainMeta(self.underlying_id, self.quote_date, self.expiry_date,
                         self.spot, self.risk_free_rate)

    @property
    def days_to_expiry(self) -> int:
        return (self.expiry_date - self.quote_date).days

    @property
    def maturity(self) -> float:
        """Year fraction ``T`` on a calendar-day / 365 basis."""
        return self.days_to_expiry / DAYS_PER_YEAR

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.bid + self.ask)

    @property
    def quotes(self) -> list[OptionQuote]:
        out = []
        for i in range(len(self)):
            iv = self.implied_vol[i]
            de = self.delta[i]
            out.append(OptionQuote(
                self.underlying_id, self.quote_date, self.expiry_date,
                float(self.strike[i]), Right.CALL if self.is_call[i] else Right.PUT,
                float(self.bid[i]), float(self.ask[i]), float(self.volume[i]),
                float(self.open_interest[i]),
                None if np.isnan(iv) else float(iv),
                None if np.isnan(de) else float(de),
            ))
        return out

    def take(self, index) -> "OptionChain":
        """Subset of quotes, preserving order and all other fields."""
        index = np.asarray(index)
        return replace(
            self,
            strike=self.strike[index], is_call=self.is_call[index],
            bid=self.bid[index], ask=self.ask[index], volume=self.volume[index],
            open_interest=self.open_interest[index],
            implied_vol=self.implied_vol[index], delta=self.delta[index],
        )

    @classmethod
    def from_arrays(cls, meta: ChainMeta, strike, is_call, bid, ask, volume=None,
                    open_interest=None, implied_vol=None, delta=None):
        strike = _as_float_array(strike)
        n = len(strike)
        ones = np.ones(n)
        order = np.lexsort((~np.asarray(is_call, dtype=bool), strike))

        def col(values, default):
            arr = default if values is None else _as_float_array(values)
            if arr.ndim == 0:
                arr = np.full(n, float(arr))
            return arr[order]

        return cls(
            meta.underlying_id, meta.quote_date, meta.expiry_date,
            float(meta.spot), float(meta.risk_free_rate),
            strike[order], np.asarray(is_call, dtype=bool)[order],
            col(bid, None), col(ask, None), col(volume, ones),
            col(open_interest, ones), col(implied_vol, ones * np.nan),
            col(delta, ones * np.nan),
        )

    @classmethod
    def from_quotes(cls, quotes: Sequence[OptionQuote], meta: ChainMeta):
        def opt(v):
            return np.nan if v is None else v

        for q in quotes:
            if (q.underlying_id, q.quote_date, q.expiry_date) != (
                    meta.underlying_id, meta.quote_date, meta.expiry_date):
                raise ValueError("all quotes must share underlying, quote date "
                                 "and expiry with the chain metadata")
        return cls.from_arrays(
            meta,
            [q.strike for q in quotes],
            [Right(q.right) is Right.CALL for q in quotes],
            [q.bid for q in quotes], [q.ask for q in quotes],
            [q.volume for q in quotes], [q.open_interest for q in quotes],
            [opt(q.implied_vol) for q in quotes], [opt(q.delta) for q in quotes],
        )


class RejectReason(str, Enum):
    MATURITY = "maturity_out_of_range"
    TOO_FEW_QUOTES = "too_few_quotes"
    NO_STRADDLE = "no_straddle"
    MISSING_SPOT = "missing_spot"
    MISSING_RATE = "missing_rate"


@dataclass(frozen=True)
class Rejected:
    """A chain that did not survive filtering.

    ``reason`` is the single rule that killed the chain; ``removed`` counts
    the quotes each quote-level rule dropped before that.
    """

    meta: ChainMeta
    reason: RejectReason
    removed: dict = field(default_factory=dict)

    def __bool__(self):
        return False


# quote-level rules in the order they are applied
QUOTE_RULES = (
    "missing_delta", "missing_implied_vol", "zero_bid", "zero_volume",
    "zero_open_interest", "negative_spread", "call_above_spot",
    "put_above_discounted_strike", "non_monotone_mid", "in_the_money",
)


def _monotone_keep(mids: np.ndarray) -> np.ndarray:
    """Keep a quote only if its mid does not exceed any earlier mid in the scan.

    Equivalent to a greedy pass against the last kept mid, since dropped
    quotes always sit above the running minimum.
    """
    if len(mids) == 0:
        return np.zeros(0, dtype=bool)
    prev_min = np.concatenate(([np.inf], np.minimum.accumulate(mids)[:-1]))
    return mids <= prev_min


def compute_forward(chain: OptionChain) -> tuple[float, float]:
    """Parity-implied forward and reference strike.

    ``F = exp(rT) * (C - P) + K*`` at the strike ``K*`` with the smallest
    ``|C - P|`` on mids (ties go to the lower strike). ``K0`` is the largest
    strike not above ``F``; when ``F`` lies below every strike the lowest
    strike is used.

    Returns
    -------
    forward, k0 : float
    """
    strike = chain.strike
    mid = chain.mid
    calls = chain.is_call
    k_call, inv_c = np.unique(strike[calls], return_inverse=True)
    k_put, inv_p = np.unique(strike[~calls], return_inverse=True)
    c_mid = np.bincount(inv_c, mid[calls]) / np.bincount(inv_c)
    p_mid = np.bincount(inv_p, mid[~calls]) / np.bincount(inv_p)
    both, ic, ip = np.intersect1d(k_call, k_put, assume_unique=True,
                                  return_indices=True)
    if len(both) == 0:
        raise NoStraddle(f"{chain.underlying_id} {chain.quote_date}: "
                         "no strike quoted on both rights")
    diff = c_mid[ic] - p_mid[ip]
    j = int(np.argmin(np.abs(diff)))  # first minimum = lowest strike
    T = chain.maturity
    forward = math.exp(chain.risk_free_rate * T) * diff[j] + both[j]
    strikes = np.unique(strike)
    below = strikes[strikes <= forward]
    k0 = below[-1] if len(below) else strikes[0]
    return float(forward), float(k0)


def filter_chain(raw_quotes, chain_meta: ChainMeta | None = None):
    """Apply the quote-level cleaning rules and out-of-the-money selection.

    Parameters
    ----------
    raw_quotes : OptionChain or sequence of OptionQuote
    chain_meta : ChainMeta
        Required when ``raw_quotes`` is a plain sequence.

    Returns
    -------
    OptionChain or Rejected
        Surviving quotes in their original order, with ``forward`` and ``k0``
        attached; or the rejection with its primary reason.
    """
    if isinstance(raw_quotes, OptionChain):
        chain = raw_quotes
        meta = chain.meta
    else:
        if chain_meta is None:
            raise TypeError("chain_meta is required for a sequence of quotes")
        meta = chain_meta
        chain = OptionChain.from_quotes(list(raw_quotes), meta)

    removed = {}
    if not (MIN_DAYS <= meta.days_to_expiry <= MAX_DAYS):
        return Rejected(meta, RejectReason.MATURITY, removed)
    if not (np.isfinite(meta.spot) and meta.spot > 0):
        return Rejected(meta, RejectReason.MISSING_SPOT, removed)
    if not np.isfinite(meta.risk_free_rate):
        return Rejected(meta, RejectReason.MISSING_RATE, removed)

    keep = np.ones(len(chain), dtype=bool)

    def apply(rule, bad):
        nonlocal keep
        hit = keep & bad
        removed[rule] = int(hit.sum())
        keep = keep & ~bad

    mid = chain.mid
    T = chain.maturity
    apply("missing_delta", np.isnan(chain.delta))
    apply("missing_implied_vol", np.isnan(chain.implied_vol))
    apply("zero_bid", ~(chain.bid > 0))
    apply("zero_volume", ~(chain.volume > 0))
    apply("zero_open_interest", ~(chain.open_interest > 0))
    apply("negative_spread", chain.ask < chain.bid)
    apply("call_above_spot", chain.is_call & (mid > meta.spot))
    apply("put_above_discounted_strike",
          ~chain.is_call & (mid > chain.strike * math.exp(-meta.risk_free_rate * T)))

    # calls must not gain value as the strike rises, puts must not as it falls
    mono_bad = np.zeros(len(chain), dtype=bool)
    idx_c = np.flatnonzero(keep & chain.is_call)
    mono_bad[idx_c[~_monotone_keep(mid[idx_c])]] = True
    idx_p = np.flatnonzero(keep & ~chain.is_call)[::-1]
    mono_bad[idx_p[~_monotone_keep(mid[idx_p])]] = True
    apply("non_monotone_mid", mono_bad)

    if keep.sum() < MIN_QUOTES:
        return Rejected(meta, RejectReason.TOO_FEW_QUOTES, removed)

    survivors = chain.take(np.flatnonzero(keep))
    if survivors.forward is not None and survivors.k0 is not None:
        forward, k0 = survivors.forward, survivors.k0
    else:
        try:
            forward, k0 = compute_forward(survivors)
        except NoStraddle:
            return Rejected(meta, RejectReason.NO_STRADDLE, removed)

    itm = np.where(survivors.is_call, survivors.strike < k0, survivors.strike > k0)
    removed["in_the_money"] = int(itm.sum())
    if (~itm).sum() < MIN_QUOTES:
        return Rejected(meta, RejectReason.TOO_FEW_QUOTES, removed)
    out = survivors.take(np.flatnonzero(~itm))
    return replace(out, forward=forward, k0=k0)


def select_expiry(days_to_expiry: Iterable[int]) -> int | None:
    """Index of the expiry closest to 30 days inside [23, 37]; ties go long."""
    best = None
    best_key = None
    for i, d in enumerate(days_to_expiry):
        if not (MIN_DAYS <= d <= MAX_DAYS):
            continue
        key = (abs(d - TARGET_DAYS), -d)
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


# --------------------------------------------------------------------------
# CSV ingestion

def _read_raw(path, columns):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    # newline handling in the csv engine makes CRLF and LF parse identically
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    header = [c.strip() for c in raw.columns]
    if header != columns:
        raise ParseError(f"{path}: header {header} does not match expected {columns}")
    raw.columns = columns
    return raw.apply(lambda s: s.str.strip())


def _parse_numeric(raw, col, errors, bad, *, optional=False, positive=False,
                   nonnegative=False):
    text = raw[col]
    empty = text == ""
    values = pd.to_numeric(text.where(~empty), errors="coerce").to_numpy(dtype=float)
    lines = raw.index.to_numpy() + 2
    unparsable = np.isnan(values) & ~empty.to_numpy()
    unparsable |= ~np.isfinite(values) & ~np.isnan(values)
    if not optional:
        missing = empty.to_numpy()
        for ln in lines[missing & ~bad]:
            errors.append(RowError(int(ln), col, "missing required value"))
        bad |= missing
    for ln in lines[unparsable & ~bad]:
        errors.append(RowError(int(ln), col, "not a number"))
    bad |= unparsable
    if positive:
        viol = ~np.isnan(values) & (values <= 0)
        for ln in lines[viol & ~bad]:
            errors.append(RowError(int(ln), col, "must be > 0"))
        bad |= viol
    if nonnegative:
        viol = ~np.isnan(values) & (values < 0)
        for ln in lines[viol & ~bad]:
            errors.append(RowError(int(ln), col, "must be >= 0"))
        bad |= viol
    return values


def _parse_dates(raw, col, errors, bad):
    parsed = pd.to_datetime(raw[col], format="%Y-%m-%d", errors="coerce")
    invalid = parsed.isna().to_numpy()
    lines = raw.index.to_numpy() + 2
    for ln in lines[invalid & ~bad]:
        errors.append(RowError(int(ln), col, "not an ISO date (YYYY-MM-DD)"))
    bad |= invalid
    return parsed


def load_option_csv(path) -> tuple[pd.DataFrame, list[RowError]]:
    """Read ``options.csv``.

    Rows failing validation are reported (line number, column, reason) and
    skipped; the remaining rows are returned typed and in file order.
    """
    raw = _read_raw(path, OPTION_COLUMNS)
    errors: list[RowError] = []
    bad = np.zeros(len(raw), dtype=bool)
    lines = raw.index.to_numpy() + 2
    empty_id = (raw["underlying_id"] == "").to_numpy()
    for ln in lines[empty_id]:
        errors.append(RowError(int(ln), "underlying_id", "missing required value"))
    bad |= empty_id
    qd = _parse_dates(raw, "quote_date", errors, bad)
    ed = _parse_dates(raw, "expiry_date", errors, bad)
    strike = _parse_numeric(raw, "strike", errors, bad, positive=True)
    right = raw["right"].str.lower()
    bad_right = ~right.isin(["call", "put", "c", "p"]).to_numpy()
    for ln in lines[bad_right & ~bad]:
        errors.append(RowError(int(ln), "right", "expected call or put"))
    bad |= bad_right
    cols = {}
    for col in ("bid", "ask", "volume", "open_interest"):
        cols[col] = _parse_numeric(raw, col, errors, bad, nonnegative=True)
    iv = _parse_numeric(raw, "implied_vol", errors, bad, optional=True)
    delta = _parse_numeric(raw, "delta", errors, bad, optional=True)
    ok_dates = ~bad
    order_bad = np.zeros(len(raw), dtype=bool)
    order_bad[ok_dates] = (ed[ok_dates] <= qd[ok_dates]).to_numpy()
    for ln in lines[order_bad]:
        errors.append(RowError(int(ln), "expiry_date", "expiry must be after quote date"))
    bad |= order_bad
    errors.sort(key=lambda e: e.line)

    keep = ~bad
    df = pd.DataFrame({
        "underlying_id": raw["underlying_id"].to_numpy()[keep],
        "quote_date": qd.dt.date.to_numpy()[keep],
        "expiry_date": ed.dt.date.to_numpy()[keep],
        "strike": strike[keep],
        "is_call": right.isin(["call", "c"]).to_numpy()[keep],
        "bid": cols["bid"][keep],
        "ask": cols["ask"][keep],
        "volume": cols["volume"][keep],
        "open_interest": cols["open_interest"][keep],
        "implied_vol": iv[keep],
        "delta": delta[keep],
    })
    return df, errors


def load_stock_csv(path) -> tuple[pd.DataFrame, list[RowError]]:
    """Read ``stocks.csv``; the ``return`` column becomes ``excess_return``."""
    raw = _read_raw(path, STOCK_COLUMNS)
    errors: list[RowError] = []
    bad = np.zeros(len(raw), dtype=bool)
    lines = raw.index.to_numpy() + 2
    empty_id = (raw["stock_id"] == "").to_numpy()
    for ln in lines[empty_id]:
        errors.append(RowError(int(ln), "stock_id", "missing required value"))
    bad |= empty_id
    date = _parse_dates(raw, "date", errors, bad)
    ret = _parse_numeric(raw, "return", errors, bad, optional=True)
    price = _parse_numeric(raw, "price", errors, bad, optional=True, positive=True)
    cap = _parse_numeric(raw, "market_cap", errors, bad, optional=True, nonnegative=True)
    vol = _parse_numeric(raw, "volume", errors, bad, optional=True, nonnegative=True)
    errors.sort(key=lambda e: e.line)
    keep = ~bad
    df = pd.DataFrame({
        "stock_id": raw["stock_id"].to_numpy()[keep],
        "date": date.to_numpy()[keep],
        "excess_return": ret[keep],
        "price": price[keep],
        "market_cap": cap[keep],
        "volume": vol[keep],
    })
    return df, errors


def load_rates_csv(path) -> tuple[pd.Series, list[RowError]]:
    raw = _read_raw(path, RATE_COLUMNS)
    errors: list[RowError] = []
    bad = np.zeros(len(raw), dtype=bool)
    date = _parse_dates(raw, "date", errors, bad)
    rate = _parse_numeric(raw, "rate", errors, bad)
    errors.sort(key=lambda e: e.line)
    keep = ~bad
    s = pd.Series(rate[keep], index=pd.DatetimeIndex(date.to_numpy()[keep]), name="rate")
    return s[~s.index.duplicated(keep="last")].sort_index(), errors


def iter_stock_records(df: pd.DataFrame) -> Iterable[StockRecord]:
    for row in df.itertuples(index=False):
        yield StockRecord(row.stock_id, pd.Timestamp(row.date).date(),
                          row.excess_return, row.price, row.market_cap, row.volume)


def iter_option_quotes(df: pd.DataFrame) -> Iterable[OptionQuote]:
    for row in df.itertuples(index=False):
        yield OptionQuote(
            row.underlying_id, row.quote_date, row.expiry_date, row.strike,
            Right.CALL if row.is_call else Right.PUT, row.bid, row.ask,
            row.volume, row.open_interest,
            None if np.isnan(row.implied_vol) else row.implied_vol,
            None if np.isnan(row.delta) else row.delta,
        )


def write_option_csv(df: pd.DataFrame, path) -> None:
    """Write quotes back out in the ``options.csv`` schema."""
    out = pd.DataFrame({
        "underlying_id": df["underlying_id"],
        "quote_date": pd.to_datetime(df["quote_date"]).dt.strftime("%Y-%m-%d"),
        "expiry_date": pd.to_datetime(df["expiry_date"]).dt.strftime("%Y-%m-%d"),
        "strike": df["strike"],
        "right": np.where(df["is_call"], "call", "put"),
        "bid": df["bid"],
        "ask": df["ask"],
        "volume": df["volume"],
        "open_interest": df["open_interest"],
        "implied_vol": df["implied_vol"],
        "delta": df["delta"],
    })
    out.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def write_stock_csv(df: pd.DataFrame, path) -> None:
    """Write a stock frame in the ``stocks.csv`` schema (``excess_return`` -> ``return``)."""
    out = df.rename(columns={"excess_return": "return"})[STOCK_COLUMNS].copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def write_rates_csv(rates: pd.Series, path) -> None:
    out = pd.DataFrame({"date": pd.DatetimeIndex(rates.index).strftime("%Y-%m-%d"),
                        "rate": rates.to_numpy(float)})
    out.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def iter_chains(quotes: pd.DataFrame, spots=None, rates=None, *, select: bool = True,
                constant_rate: float | None = None):
    """Group loaded quotes into :class:`OptionChain` objects.

    Arguments are those of :func:`chain_table`; chains come out ordered by
    (underlying, quote date, expiry).
    """
    q, chains = chain_table(quotes, spots, rates, select=select,
                            constant_rate=constant_rate)
    if len(q) == 0:
        return
    bounds = np.flatnonzero(np.diff(q["chain"].to_numpy())) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [len(q)]))
    cols = {c: q[c].to_numpy() for c in ("strike", "is_call", "bid", "ask", "volume",
                                         "open_interest", "implied_vol", "delta")}
    for s, e in zip(starts, ends):
        row = chains.iloc[int(q["chain"].iat[s])]
        meta = ChainMeta(row["underlying_id"], row["quote_date"].date(),
                         row["expiry_date"].date(), float(row["spot"]), float(row["rate"]))
        yield OptionChain(
            meta.underlying_id, meta.quote_date, meta.expiry_date, meta.spot,
            meta.risk_free_rate, cols["strike"][s:e].astype(float),
            cols["is_call"][s:e].astype(bool), cols["bid"][s:e].astype(float),
            cols["ask"][s:e].astype(float), cols["volume"][s:e].astype(float),
            cols["open_interest"][s:e].astype(float),
            cols["implied_vol"][s:e].astype(float), cols["delta"][s:e].astype(float),
        )


def chains_to_frame(chains: Iterable[OptionChain]) -> pd.DataFrame:
    """Flatten chains back to the quote-frame layout used by the loaders."""
    parts = []
    for c in chains:
        n = len(c)
        parts.append(pd.DataFrame({
            "underlying_id": [c.underlying_id] * n,
            "quote_date": [c.quote_date] * n,
            "expiry_date": [c.expiry_date] * n,
            "strike": c.strike, "is_call": c.is_call, "bid": c.bid, "ask": c.ask,
            "volume": c.volume, "open_interest": c.open_interest,
            "implied_vol": c.implied_vol, "delta": c.delta,
        }))
    if not parts:
        return pd.DataFrame(columns=["underlying_id", "quote_date", "expiry_date",
                                     "strike", "is_call", "bid", "ask", "volume",
                                     "open_interest", "implied_vol", "delta"])
    return pd.concat(parts, ignore_index=True)


# --------------------------------------------------------------------------
# Vectorised path over many chains at once. Mirrors filter_chain /
# compute_forward rule for rule; tests hold the two paths equal.

QUOTE_VALUE_COLUMNS = ["strike", "is_call", "bid", "ask", "volume", "open_interest",
                       "implied_vol", "delta"]
CHAIN_COLUMNS = ["chain", "underlying_id", "quote_date", "expiry_date", "spot",
                 "rate", "days"]


_NS_PER_DAY = 86_400 * 10**9


def _date_ns(col: pd.Series) -> np.ndarray:
    """Dates as int64 nanoseconds; object columns are parsed once per unique value."""
    if np.issubdtype(col.dtype, np.datetime64):
        return col.to_numpy(dtype="datetime64[ns]").view("i8")
    codes, uniq = pd.factorize(col)
    parsed = pd.to_datetime(pd.Series(uniq)).to_numpy(dtype="datetime64[ns]").view("i8")
    return parsed[codes]


def chain_table(quotes: pd.DataFrame, spots=None, rates=None, *,
                select: bool = True, constant_rate: float | None = None):
    """Index quotes by chain and attach spot, rate and days to expiry.

    Parameters
    ----------
    quotes : DataFrame in the :func:`load_option_csv` layout
    spots : Series indexed by (underlying_id, Timestamp), or mapping
    rates : Series indexed by Timestamp
    select : keep one expiry per (underlying, date), closest to 30 days
    constant_rate : overrides ``rates`` when given

    Returns
    -------
    quotes : DataFrame
        :data:`QUOTE_VALUE_COLUMNS` plus an integer ``chain`` column, rows
        sorted by (chain, strike, calls first). Identifiers live in ``chains``.
    chains : DataFrame
        One row per chain with :data:`CHAIN_COLUMNS`.
    """
    ucode, uvals = pd.factorize(quotes["underlying_id"], sort=True)
    d_ns = _date_ns(quotes["quote_date"])
    e_ns = _date_ns(quotes["expiry_date"])
    q = pd.DataFrame({k: quotes[k].to_numpy() for k in QUOTE_VALUE_COLUMNS})
    dte = (e_ns - d_ns) // _NS_PER_DAY
    if select and len(q):
        # out-of-window expiries are kept only when nothing lands inside, so the
        # chain is rejected on maturity instead of silently disappearing
        rank_in = ((dte < MIN_DAYS) | (dte > MAX_DAYS)).astype(np.int64)
        dist = np.abs(dte - TARGET_DAYS)
        order = np.lexsort((-dte, dist, rank_in, d_ns, ucode))
        us, ds = ucode[order], d_ns[order]
        start = np.ones(len(order), dtype=bool)
        start[1:] = (us[1:] != us[:-1]) | (ds[1:] != ds[:-1])
        gid = np.cumsum(start) - 1
        want = np.empty_like(dte)
        want[order] = dte[order][start][gid]
        sel = dte == want
        q = q[sel].reset_index(drop=True)
        ucode, d_ns, e_ns = ucode[sel], d_ns[sel], e_ns[sel]
    by_chain = np.lexsort((e_ns, d_ns, ucode))
    us, ds, es = ucode[by_chain], d_ns[by_chain], e_ns[by_chain]
    new = np.ones(len(by_chain), dtype=bool)
    new[1:] = (us[1:] != us[:-1]) | (ds[1:] != ds[:-1]) | (es[1:] != es[:-1])
    codes = np.empty(len(by_chain), dtype=np.int64)
    codes[by_chain] = np.cumsum(new) - 1
    q = q.assign(chain=codes)
    order = np.lexsort((~q["is_call"].to_numpy(dtype=bool), q["strike"].to_numpy(), codes))
    q = q.iloc[order].reset_index(drop=True)

    cu = np.asarray(uvals, dtype=object)[us[new]]
    cd = pd.DatetimeIndex(ds[new].view("datetime64[ns]"))
    ce = pd.DatetimeIndex(es[new].view("datetime64[ns]"))
    if spots is None:
        spot = np.full(len(cu), np.nan)
    elif isinstance(spots, pd.Series):
        spot = spots.reindex(pd.MultiIndex.from_arrays([cu, cd])).to_numpy(dtype=float)
    else:
        spot = np.array([spots.get((u, d), np.nan) for u, d in zip(cu, cd)], dtype=float)
    if constant_rate is not None:
        rate = np.full(len(cu), float(constant_rate))
    elif rates is None:
        rate = np.full(len(cu), np.nan)
    else:
        rate = rates.reindex(cd).to_numpy(dtype=float)
    chains = pd.DataFrame({
        "chain": np.arange(len(cu)), "underlying_id": cu,
        "quote_date": cd, "expiry_date": ce, "spot": spot, "rate": rate,
        "days": (ce - cd).days.to_numpy(),
    })
    return q, chains


def _segment_prev_min(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Minimum of the earlier values within each group segment (inf at starts)."""
    s = pd.Series(values)
    cm = s.groupby(groups, sort=False).cummin().to_numpy()
    prev = np.empty_like(cm)
    prev[1:] = cm[:-1]
    starts = np.ones(len(values), dtype=bool)
    starts[1:] = groups[1:] != groups[:-1]
    prev[starts] = np.inf
    return prev


def filter_quotes(quotes: pd.DataFrame, chains: pd.DataFrame):
    """Batch version of :func:`filter_chain` over a :func:`chain_table` result.

    Returns
    -------
    kept : DataFrame
        Surviving quotes (same row order) for accepted chains.
    accepted : DataFrame
        Chain rows that survived, with ``forward`` and ``k0`` columns.
    rejected : DataFrame
        ``chain``, ``underlying_id``, ``quote_date``, ``expiry_date``, ``reason``.
    """
    n_chain = len(chains)
    reason = np.full(n_chain, None, dtype=object)
    days = chains["days"].to_numpy()
    spot = chains["spot"].to_numpy(dtype=float)
    rate = chains["rate"].to_numpy(dtype=float)
    reason[~((days >= MIN_DAYS) & (days <= MAX_DAYS))] = RejectReason.MATURITY.value
    open_ = reason == None  # noqa: E711
    reason[open_ & ~(np.isfinite(spot) & (spot > 0))] = RejectReason.MISSING_SPOT.value
    open_ = reason == None  # noqa: E711
    reason[open_ & ~np.isfinite(rate)] = RejectReason.MISSING_RATE.value

    c = quotes["chain"].to_numpy()
    strike = quotes["strike"].to_numpy(dtype=float)
    is_call = quotes["is_call"].to_numpy(dtype=bool)
    bid = quotes["bid"].to_numpy(dtype=float)
    ask = quotes["ask"].to_numpy(dtype=float)
    mid = 0.5 * (bid + ask)
    T = days / DAYS_PER_YEAR
    growth = np.exp(rate * T)
    discount = np.exp(-rate * T)

    keep = (reason == None)[c]  # noqa: E711
    keep &= ~np.isnan(quotes["delta"].to_numpy(dtype=float))
    keep &= ~np.isnan(quotes["implied_vol"].to_numpy(dtype=float))
    keep &= bid > 0
    keep &= quotes["volume"].to_numpy(dtype=float) > 0
    keep &= quotes["open_interest"].to_numpy(dtype=float) > 0
    keep &= ~(ask < bid)
    keep &= ~(is_call & (mid > spot[c]))
    keep &= ~(~is_call & (mid > strike * discount[c]))

    # monotone mids: calls scanned up the strike ladder, puts down it
    mono_bad = np.zeros(len(quotes), dtype=bool)
    idx = np.flatnonzero(keep & is_call)
    if len(idx):
        prev = _segment_prev_min(mid[idx], c[idx])
        mono_bad[idx[mid[idx] > prev]] = True
    idx = np.flatnonzero(keep & ~is_call)[::-1]
    if len(idx):
        prev = _segment_prev_min(mid[idx], c[idx])
        mono_bad[idx[mid[idx] > prev]] = True
    keep &= ~mono_bad

    count = np.bincount(c[keep], minlength=n_chain)
    open_ = reason == None  # noqa: E711
    reason[open_ & (count < MIN_QUOTES)] = RejectReason.TOO_FEW_QUOTES.value
    keep &= (reason == None)[c]  # noqa: E711

    # parity forward at the strike with the smallest |C - P|
    kc, kk, km, kcall = c[keep], strike[keep], mid[keep], is_call[keep]
    order = np.lexsort((kk, kc))
    gc, gk = kc[order], kk[order]
    start = np.ones(len(order), dtype=bool)
    start[1:] = (gc[1:] != gc[:-1]) | (gk[1:] != gk[:-1])
    g = np.empty(len(order), dtype=np.int64)
    g[order] = np.cumsum(start) - 1
    n_call = np.bincount(g, weights=kcall, minlength=start.sum())
    n_put = np.bincount(g, weights=~kcall, minlength=start.sum())
    s_call = np.bincount(g, weights=np.where(kcall, km, 0.0), minlength=start.sum())
    s_put = np.bincount(g, weights=np.where(kcall, 0.0, km), minlength=start.sum())
    pair_chain, pair_strike = gc[start], gk[start]
    both = (n_call > 0) & (n_put > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = s_call / n_call - s_put / n_put
    pc, pk, pdiff = pair_chain[both], pair_strike[both], diff[both]
    best = np.lexsort((pk, np.abs(pdiff), pc))
    first = np.ones(len(best), dtype=bool)
    first[1:] = pc[best][1:] != pc[best][:-1]
    best = best[first]
    forward = np.full(n_chain, np.nan)
    bc = pc[best]
    forward[bc] = growth[bc] * pdiff[best] + pk[best]
    open_ = reason == None  # noqa: E711
    reason[open_ & np.isnan(forward)] = RejectReason.NO_STRADDLE.value
    keep &= (reason == None)[c]  # noqa: E711

    # K0: largest strike <= F, else the lowest strike of the chain
    ks = pd.DataFrame({"chain": c[keep], "strike": strike[keep]}).drop_duplicates()
    ok_chains = np.flatnonzero(reason == None)  # noqa: E711
    allk = np.concatenate([ks["strike"].to_numpy(), forward[ok_chains]])
    allc = np.concatenate([ks["chain"].to_numpy(), ok_chains])
    flag = np.concatenate([np.zeros(len(ks), int), np.ones(len(ok_chains), int)])
    order = np.lexsort((flag, allk, allc))
    sk, sc, sf = allk[order], allc[order], flag[order]
    pos = np.where(sf == 0, np.arange(len(order)), -1)
    last = np.maximum.accumulate(pos)
    k0 = np.full(n_chain, np.nan)
    qpos = np.flatnonzero(sf == 1)
    lp = last[qpos]
    valid = (lp >= 0)
    valid[valid] = sc[lp[valid]] == sc[qpos[valid]]
    k0[sc[qpos[valid]]] = sk[lp[valid]]
    lowest = ks.groupby("chain")["strike"].min()
    miss = np.isnan(k0) & (reason == None)  # noqa: E711
    k0[miss] = lowest.reindex(np.flatnonzero(miss)).to_numpy()

    itm = np.where(is_call, strike < k0[c], strike > k0[c])
    keep &= ~itm
    count = np.bincount(c[keep], minlength=n_chain)
    open_ = reason == None  # noqa: E711
    reason[open_ & (count < MIN_QUOTES)] = RejectReason.TOO_FEW_QUOTES.value
    keep &= (reason == None)[c]  # noqa: E711

    ok = reason == None  # noqa: E711
    accepted = chains[ok].assign(forward=forward[ok], k0=k0[ok]).reset_index(drop=True)
    rejected = chains.loc[~ok, ["chain", "underlying_id", "quote_date", "expiry_date"]] \
        .assign(reason=reason[~ok]).reset_index(drop=True)
    return quotes[keep].reset_index(drop=True), accepted, rejected
