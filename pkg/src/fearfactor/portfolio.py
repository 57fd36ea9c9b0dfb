"""Beta-sorted portfolios, spreads and factor-model alphas."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._utils import InsufficientOverlap, map_ordered, write_csv
from .cross_section import hac_covariance, mean_t_stat, ols

logger = logging.getLogger(__name__)

SCHEMES = ("single", "controlled", "conditional_double", "unconditional_double")
FF5 = ["mkt_rf", "smb", "hml", "rmw", "cma"]
FACTOR_MODELS = {"FF5": FF5, "FF5+MOM": FF5 + ["mom"]}
FF_COLUMNS = ["date", "mkt_rf", "smb", "hml", "rmw", "cma", "mom", "rf"]
PORTFOLIO_COLUMNS = ["scheme", "bucket", "date", "return", "n_stocks"]


@dataclass(frozen=True)
class SortSpec:
    n_quantiles: int = 5
    weighting: str = "value"
    control: str | None = None
    scheme: str = "single"

    def __post_init__(self):
        if self.n_quantiles < 2:
            raise ValueError("n_quantiles must be at least 2")
        if self.weighting not in ("value", "equal"):
            raise ValueError("weighting must be 'value' or 'equal'")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.scheme != "single" and not self.control:
            raise ValueError(f"scheme {self.scheme!r} needs a control variable")


@dataclass
class PortfolioReturnPanel:
    """Monthly bucket returns dated at the holding month's last trading day."""

    scheme: str
    returns: pd.DataFrame
    n_stocks: pd.DataFrame
    memberships: pd.DataFrame = field(default_factory=pd.DataFrame)
    spread_label: str = "5-1"

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self.returns.index)

    @property
    def spread(self) -> pd.Series:
        return self.returns[self.spread_label]

    def to_frame(self) -> pd.DataFrame:
        r = self.returns.stack(future_stack=True).rename("return")
        n = self.n_stocks.reindex(index=self.returns.index, columns=self.returns.columns)
        n = n.stack(future_stack=True).rename("n_stocks")
        df = pd.concat([r, n], axis=1).reset_index()
        df.columns = ["date", "bucket", "return", "n_stocks"]
        df.insert(0, "scheme", self.scheme)
        order = {b: i for i, b in enumerate(self.returns.columns)}
        df["_o"] = df["bucket"].map(order)
        df = df.sort_values(["_o", "date"], kind="stable").drop(columns="_o")
        df["n_stocks"] = df["n_stocks"].astype("Int64")
        return df[PORTFOLIO_COLUMNS].reset_index(drop=True)


# --------------------------------------------------------------------------
# monthly panels

def monthly_panels(stocks: pd.DataFrame) -> dict:
    """Month-end characteristics from the daily stock file.

    Returns
    -------
    dict of DataFrames (month-end x stock): ``ret`` (compounded month
    return), ``cap`` and ``price`` (last observation in the month),
    ``volume`` (mean daily volume); plus ``month_end`` mapping each period to
    the month's last trading date.
    """
    df = stocks[["stock_id", "date", "excess_return", "price", "market_cap", "volume"]]
    both = df.pivot(index="date", columns="stock_id").sort_index()
    wide = {c: both[c] for c in ("excess_return", "price", "market_cap", "volume")}
    dates = wide["price"].index
    month = dates.to_period("M")
    month_end = pd.Series(dates, index=dates).groupby(month).max()
    month_end.index.name = "month"
    ends = pd.DatetimeIndex(month_end.to_numpy())

    def monthly(frame, how):
        g = frame.groupby(month)
        out = np.expm1(np.log1p(frame).groupby(month).sum(min_count=1)) if how == "ret" \
            else getattr(g, how)()
        out.index = ends
        out.columns.name = None
        return out.sort_index(axis=1)

    return {"ret": monthly(wide["excess_return"], "ret"),
            "cap": monthly(wide["market_cap"], "last"),
            "price": monthly(wide["price"], "last"),
            "volume": monthly(wide["volume"], "mean"), "month_end": month_end}


def _stable_order(values: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorting ``values`` ascending with ties broken by ``ids``."""
    return np.lexsort((ids, values))


def _eligible_mask(cap, price, ret, ids, cap_cut=0.30, min_price=5.0, tail=0.05):
    """Rules applied together on one month's cross-section."""
    ok = np.isfinite(cap) & np.isfinite(price) & np.isfinite(ret)
    idx = np.flatnonzero(ok)
    n = idx.size
    keep = np.zeros(cap.size, bool)
    if n == 0:
        return keep
    keep[idx] = True
    small = idx[_stable_order(cap[idx], ids[idx])][:int(np.floor(cap_cut * n))]
    keep[small] = False
    keep[idx[price[idx] < min_price]] = False
    k = int(np.floor(tail * n))
    if k:
        order = idx[_stable_order(ret[idx], ids[idx])]
        keep[order[:k]] = False
        keep[order[n - k:]] = False
    return keep


def eligible_universe(stocks, month, *, cap_cut=0.30, min_price=5.0, tail=0.05) -> set:
    """Stocks eligible for holding in the month after ``month``.

    Drops, on the month-``t`` cross-section, the bottom ``cap_cut`` fraction
    by market cap, prices below ``min_price``, and the ``tail`` fraction at
    each end of the month-``t`` return distribution. Ties are ordered by
    stock id. ``stocks`` is the daily stock frame or the output of
    :func:`monthly_panels`.
    """
    panels = stocks if isinstance(stocks, dict) else monthly_panels(stocks)
    month = pd.Timestamp(month)
    per = month.to_period("M")
    rows = [d for d in panels["cap"].index if d.to_period("M") == per]
    if not rows:
        return set()
    d = rows[0]
    ids = panels["cap"].columns.to_numpy()
    mask = _eligible_mask(panels["cap"].loc[d].to_numpy(float),
                          panels["price"].loc[d].reindex(ids).to_numpy(float),
                          panels["ret"].loc[d].reindex(ids).to_numpy(float),
                          ids.astype(str), cap_cut, min_price, tail)
    return set(ids[mask])


def eligibility_panel(panels: dict, **kw) -> pd.DataFrame:
    """Boolean month x stock frame of eligibility from month-``t`` data."""
    cap = panels["cap"]
    ids = cap.columns.to_numpy()
    price = panels["price"].reindex(columns=ids)
    ret = panels["ret"].reindex(index=cap.index, columns=ids)
    out = np.zeros(cap.shape, bool)
    sid = ids.astype(str)
    for i in range(cap.shape[0]):
        out[i] = _eligible_mask(cap.iloc[i].to_numpy(float), price.iloc[i].to_numpy(float),
                                ret.iloc[i].to_numpy(float), sid, **kw)
    return pd.DataFrame(out, index=cap.index, columns=ids)


# --------------------------------------------------------------------------
# sorting

def quantile_buckets(values, ids, q: int) -> np.ndarray:
    """Bucket 0..q-1 from equal-count ranks, ties ordered by id."""
    values = np.asarray(values, float)
    n = values.size
    order = _stable_order(values, np.asarray(ids).astype(str))
    b = np.empty(n, dtype=int)
    b[order] = (np.arange(n) * q) // n
    return b


def _bucket_return(ret, w, groups, n_groups):
    """Weighted mean return and count per group over members with a return."""
    have = np.isfinite(ret) & (groups >= 0)
    g = groups[have]
    wt = w[have]
    num = np.bincount(g, wt * ret[have], minlength=n_groups)
    den = np.bincount(g, wt, minlength=n_groups)
    cnt = np.bincount(g, minlength=n_groups)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / den, np.nan)
    return r, cnt


def _form_month(args):
    (date, hold_date, ids, beta, ctrl, cap, ret_next, spec) = args
    q = spec.n_quantiles
    n = ids.size
    w = cap if spec.weighting == "value" else np.ones(n)
    labels, values, counts = [], [], []
    members = None
    if spec.scheme == "single":
        if n < q:
            return None
        b = quantile_buckets(beta, ids, q)
        r, c = _bucket_return(ret_next, w, b, q)
        labels = [str(j + 1) for j in range(q)] + [f"{q}-1"]
        values = list(r) + [r[-1] - r[0]]
        counts = list(c) + [c[-1] + c[0]]
        members = pd.DataFrame({"stock_id": ids, "bucket": (b + 1).astype(str)})
    else:
        if spec.scheme in ("controlled", "conditional_double"):
            if n < q * q:
                return None
            cb = quantile_buckets(ctrl, ids, q)
            bb = np.empty(n, dtype=int)
            for i in range(q):
                m = cb == i
                bb[m] = quantile_buckets(beta[m], ids[m], q)
        else:
            if n < q:
                return None
            cb = quantile_buckets(ctrl, ids, q)
            bb = quantile_buckets(beta, ids, q)
        cell = cb * q + bb
        r, c = _bucket_return(ret_next, w, cell, q * q)
        grid = r.reshape(q, q)            # rows: control bucket, cols: beta bucket
        cnt = c.reshape(q, q)
        members = pd.DataFrame({"stock_id": ids,
                                "bucket": [f"c{i + 1}b{j + 1}" for i, j in zip(cb, bb)]})
        beta_margin = grid.mean(axis=0)   # equal average of control-matched cells
        if spec.scheme == "controlled":
            labels = [str(j + 1) for j in range(q)] + [f"{q}-1"]
            values = list(beta_margin) + [beta_margin[-1] - beta_margin[0]]
            counts = list(cnt.sum(axis=0)) + [cnt[:, -1].sum() + cnt[:, 0].sum()]
        else:
            ctrl_margin = grid.mean(axis=1)
            for i in range(q):
                for j in range(q):
                    labels.append(f"c{i + 1}b{j + 1}")
                    values.append(grid[i, j])
                    counts.append(cnt[i, j])
            for j in range(q):
                labels.append(f"b{j + 1}")
                values.append(beta_margin[j])
                counts.append(cnt[:, j].sum())
            for i in range(q):
                labels.append(f"c{i + 1}")
                values.append(ctrl_margin[i])
                counts.append(cnt[i].sum())
            for i in range(q):
                labels.append(f"c{i + 1}:b{q}-b1")
                values.append(grid[i, -1] - grid[i, 0])
                counts.append(cnt[i, -1] + cnt[i, 0])
            for j in range(q):
                labels.append(f"b{j + 1}:c{q}-c1")
                values.append(grid[-1, j] - grid[0, j])
                counts.append(cnt[-1, j] + cnt[0, j])
            labels.append(f"{q}-1")
            values.append(beta_margin[-1] - beta_margin[0])
            counts.append(cnt[:, -1].sum() + cnt[:, 0].sum())
    members.insert(0, "date", date)
    return hold_date, labels, values, counts, members


def _last_row_by_period(frame: pd.DataFrame) -> dict:
    """Map each calendar month to the frame's last row dated inside it."""
    frame = frame.sort_index()
    per = pd.DatetimeIndex(frame.index).to_period("M")
    last = ~per.duplicated(keep="last")
    return {p: frame.iloc[i] for p, i in zip(per[last], np.flatnonzero(last))}


def sort_portfolios(betas: pd.DataFrame, returns: pd.DataFrame, caps: pd.DataFrame,
                    spec: SortSpec = SortSpec(), *, eligible: pd.DataFrame | None = None,
                    control: pd.DataFrame | None = None, beta_column: str = "beta_cf"
                    ) -> PortfolioReturnPanel:
    """Monthly-rebalanced sorts on betas.

    Parameters
    ----------
    betas : DataFrame in the betas.csv layout (``stock_id``, ``as_of_month``,
        ``beta_cf``, ``beta_control``)
    returns : DataFrame, month-end x stock, return realised within each month
    caps : DataFrame, month-end x stock, market cap at the month-end
    spec : SortSpec
        ``spec.control`` names a betas column (e.g. ``beta_control``) or a
        characteristic supplied in ``control``.
    eligible : boolean DataFrame (month-end x stock), optional
    control : DataFrame (month-end x stock) of a characteristic, optional

    Betas dated at month ``t`` form portfolios with month-``t`` caps held
    over month ``t+1``. Members without a month ``t+1`` return are dropped
    and the remaining weights renormalise.
    """
    months = pd.DatetimeIndex(returns.index).sort_values()
    caps = caps.sort_index()
    b = betas.copy()
    b["as_of_month"] = pd.to_datetime(b["as_of_month"])
    per_month = {d: g for d, g in b.groupby("as_of_month", sort=True)}
    period_index = {d.to_period("M"): d for d in months}
    cap_at = _last_row_by_period(caps)
    elig_at = _last_row_by_period(eligible) if eligible is not None else None
    ctrl_at = _last_row_by_period(control) if control is not None else None
    jobs = []
    for d, g in per_month.items():
        per = d.to_period("M")
        hold = period_index.get(per + 1)
        if hold is None:
            continue
        cap_row = cap_at.get(per)
        if cap_row is None:
            continue
        g = g[np.isfinite(g[beta_column].to_numpy(float))]
        ids = g["stock_id"].astype(str).to_numpy()
        cap = cap_row.reindex(ids).to_numpy(float)
        keep = np.isfinite(cap) & (cap > 0)
        if eligible is not None:
            erow = elig_at.get(per)
            el = erow.reindex(ids).fillna(False).to_numpy(bool) if erow is not None else \
                np.zeros(ids.size, bool)
            keep &= el
        ctrl = None
        if spec.scheme != "single":
            if spec.control in g.columns:
                ctrl = g[spec.control].to_numpy(float)
            elif control is not None:
                crow = ctrl_at.get(per)
                ctrl = crow.reindex(ids).to_numpy(float) if crow is not None else \
                    np.full(ids.size, np.nan)
            else:
                raise ValueError(f"control {spec.control!r} not found")
            keep &= np.isfinite(ctrl)
        ret_next = returns.loc[hold].reindex(ids).to_numpy(float)
        jobs.append((d, hold, ids[keep], g[beta_column].to_numpy(float)[keep],
                     None if ctrl is None else ctrl[keep], cap[keep], ret_next[keep], spec))
    results = map_ordered(_form_month, jobs, chunk=8)
    rows, counts, members, label_order = {}, {}, [], None
    for job, res in zip(jobs, results):
        if res is None:
            logger.info("%s: too few eligible stocks", job[0].date())
            continue
        hold, labels, values, cnts, mem = res
        label_order = labels
        rows[hold] = values
        counts[hold] = cnts
        members.append(mem)
    q = spec.n_quantiles
    if label_order is None:
        label_order = [str(j + 1) for j in range(q)] + [f"{q}-1"]
    ret_df = pd.DataFrame.from_dict(rows, orient="index", columns=label_order).sort_index()
    cnt_df = pd.DataFrame.from_dict(counts, orient="index", columns=label_order).sort_index()
    ret_df.index.name = cnt_df.index.name = "date"
    mem_df = pd.concat(members, ignore_index=True) if members else \
        pd.DataFrame(columns=["date", "stock_id", "bucket"])
    return PortfolioReturnPanel(spec.scheme, ret_df, cnt_df, mem_df, f"{q}-1")


def daily_bucket_returns(panel: PortfolioReturnPanel, stocks: pd.DataFrame,
                         caps: pd.DataFrame, weighting: str = "value") -> pd.DataFrame:
    """Daily returns of the single-sort buckets over each holding month.

    Weights are the formation-month caps, held fixed through the month.
    """
    daily = stocks.pivot(index="date", columns="stock_id", values="excess_return").sort_index()
    per = daily.index.to_period("M")
    ids_all = daily.columns
    D = daily.to_numpy(float)
    buckets = [c for c in panel.returns.columns if c.isdigit()]
    col = {b: j for j, b in enumerate(buckets)}
    out = np.full((len(daily), len(buckets)), np.nan)
    cap_at = _last_row_by_period(caps)
    for form_date, mem in panel.memberships.groupby("date"):
        form_per = pd.Timestamp(form_date).to_period("M")
        rows = np.flatnonzero(per == form_per + 1)
        if not rows.size or form_per not in cap_at:
            continue
        cap_row = cap_at[form_per]
        block = D[rows]
        for bname, m in mem.groupby("bucket"):
            ids = m["stock_id"].to_numpy()
            pos = ids_all.get_indexer(ids)
            R = np.where(pos >= 0, block[:, pos], np.nan)
            w = cap_row.reindex(ids).to_numpy(float) if weighting == "value" else np.ones(ids.size)
            W = np.where(np.isfinite(R), w, 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                out[rows, col[bname]] = np.nansum(R * W, axis=1) / W.sum(axis=1)
    out = pd.DataFrame(out, index=daily.index, columns=buckets)
    return out.dropna(how="all")


# --------------------------------------------------------------------------
# alphas

def read_ff_factors(path) -> pd.DataFrame:
    df = pd.read_csv(path, parse_dates=["date"])
    missing = set(FF_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return df[FF_COLUMNS].sort_values("date").reset_index(drop=True)


def write_ff_factors(df: pd.DataFrame, path) -> None:
    write_csv(df[FF_COLUMNS], path)


def alpha_regression(portfolio_returns: pd.Series, factor_model: str = "FF5",
                     factor_file=None, nw_lags: int = 12, min_overlap: int = 36) -> dict:
    """Time-series alpha of monthly excess returns on a factor model.

    ``factor_file`` is the ff_factors.csv path or an equivalent DataFrame.
    Returns and factors are matched by calendar month. The alpha t-statistic
    uses the Newey-West sandwich with ``nw_lags`` lags.
    """
    if factor_model not in FACTOR_MODELS:
        raise ValueError(f"factor_model must be one of {list(FACTOR_MODELS)}")
    ff = factor_file if isinstance(factor_file, pd.DataFrame) else read_ff_factors(factor_file)
    cols = FACTOR_MODELS[factor_model]
    f = ff.set_index(pd.to_datetime(ff["date"]).dt.to_period("M"))[cols]
    y = portfolio_returns.dropna()
    y = pd.Series(y.to_numpy(float), index=pd.DatetimeIndex(y.index).to_period("M"))
    joined = pd.concat([y.rename("y"), f], axis=1, join="inner").dropna()
    if len(joined) < min_overlap:
        raise InsufficientOverlap(f"{len(joined)} months overlap, need {min_overlap}")
    X = np.column_stack([np.ones(len(joined)), joined[cols].to_numpy(float)])
    yv = joined["y"].to_numpy(float)
    coef, resid = ols(yv, X)
    cov = hac_covariance(X, resid, min(nw_lags, len(yv) - 1))
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    return {"alpha": float(coef[0]), "t_alpha": float(t[0]),
            "betas": pd.Series(coef[1:], index=cols), "t_betas": pd.Series(t[1:], index=cols),
            "n_months": len(yv)}


def spread_summary(panel: PortfolioReturnPanel, ff=None, nw_lags: int = 12,
                   scale: float = 100.0) -> pd.DataFrame:
    """Mean, NW t and (with ``ff``) FF5 and FF5+MOM alphas per bucket.

    Rows follow the quintile-table layout; values are in percent per month.
    """
    cols = {}
    for label in panel.returns.columns:
        s = panel.returns[label].dropna()
        if len(s) < 2:
            continue
        m, t = mean_t_stat(s, nw_lags)
        col = {"mean": scale * m, "t": t}
        if ff is not None:
            for model, key in (("FF5", "FF5"), ("FF5+MOM", "FF5+MOM")):
                try:
                    a = alpha_regression(s, model, ff, nw_lags)
                    col[f"alpha {key}"] = scale * a["alpha"]
                    col[f"t alpha {key}"] = a["t_alpha"]
                except InsufficientOverlap:
                    col[f"alpha {key}"] = col[f"t alpha {key}"] = np.nan
        cols[label] = col
    return pd.DataFrame(cols)


def write_portfolios_csv(panels, path) -> None:
    frames = [p.to_frame() for p in panels]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PORTFOLIO_COLUMNS)
    write_csv(df, path)


def write_memberships_csv(panels, path) -> None:
    frames = []
    for p in panels:
        m = p.memberships.copy()
        m.insert(0, "scheme", p.scheme)
        frames.append(m)
    df = pd.concat(frames, ignore_index=True) if frames else \
        pd.DataFrame(columns=["scheme", "date", "stock_id", "bucket"])
    write_csv(df, path)
