"""Rolling stock loadings on common-fear innovations.

At every month-end each stock's daily excess return is regressed on a
constant, the factor innovation and one control over the trailing window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from ._utils import map_ordered, month_ends, write_csv

logger = logging.getLogger(__name__)

BETA_COLUMNS = ["stock_id", "as_of_month", "factor_name", "control_name",
                "beta_cf", "beta_control", "intercept", "n_obs"]
CONTROLS = ("none", "vix", "mf", "mkt", "mcap", "volume")


@dataclass(frozen=True)
class ExposureEstimate:
    stock_id: str
    as_of_month: pd.Timestamp
    beta_cf: float
    beta_control: float
    intercept: float
    n_obs: int
    factor_name: str = "CF"
    control_name: str = "none"


def _window_betas(R, D, valid_design, min_obs, cond_max=1e10):
    """OLS of each column of ``R`` on ``[1, D]`` over rows where both exist.

    Returns coefficients (N, 1 + p), n_obs and a status code per stock:
    0 ok, 1 too few observations, 2 singular design, 3 constant response.
    """
    T, N = R.shape
    p = D.shape[1]
    M = ~np.isnan(R) & valid_design[:, None]
    Mf = M.astype(float)
    Y = np.where(M, R, 0.0)
    Dz = np.where(valid_design[:, None], D, 0.0)
    n = Mf.sum(axis=0)
    status = np.zeros(N, dtype=np.int8)
    status[n < min_obs] = 1
    nn = np.maximum(n, 1.0)
    xbar = (Mf.T @ Dz) / nn[:, None]                       # (N, p)
    ybar = Y.sum(axis=0) / nn
    # centred cross products per stock
    outer = (Dz[:, :, None] * Dz[:, None, :]).reshape(T, p * p)
    Sxx = (Mf.T @ outer).reshape(N, p, p) - nn[:, None, None] * \
        xbar[:, :, None] * xbar[:, None, :]
    Sxy = Y.T @ Dz - nn[:, None] * xbar * ybar[:, None]
    yy = np.einsum("tn,tn->n", Y, Y)
    Syy = yy - nn * ybar**2
    var = np.diagonal(Sxx, axis1=1, axis2=2)
    msq = (Mf.T @ (Dz * Dz)) / nn[:, None]
    tiny = var <= 1e-14 * np.maximum(msq, 1e-300) * nn[:, None]
    sd = np.sqrt(np.where(tiny, 1.0, var))
    corr = Sxx / (sd[:, :, None] * sd[:, None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(corr) if p > 1 else np.ones(N)
    singular = tiny.any(axis=1) | ~np.isfinite(cond) | (cond > cond_max)
    status[(status == 0) & singular] = 2
    ymsq = yy / nn
    status[(status == 0) & (Syy <= 1e-14 * np.maximum(ymsq, 1e-300) * nn)] = 3
    coef = np.full((N, p + 1), np.nan)
    ok = status == 0
    if ok.any():
        b = np.linalg.solve(Sxx[ok], Sxy[ok][:, :, None])[:, :, 0]
        coef[ok, 1:] = b
        coef[ok, 0] = ybar[ok] - np.einsum("ni,ni->n", xbar[ok], b)
    return coef, n.astype(int), status


class RollingBetas(BaseEstimator):
    """Month-end rolling OLS loadings.

    Parameters
    ----------
    window : int
        Trailing trading days ending at the month-end.
    min_obs : int
        Minimum jointly observed days for an estimate.

    Attributes
    ----------
    betas_ : DataFrame in the betas.csv layout
    diagnostics_ : DataFrame of skipped (stock, month) pairs with a reason
    """

    REASONS = {1: "too_few_obs", 2: "singular_design", 3: "constant_response"}

    def __init__(self, window=252, min_obs=200, factor_name="CF", control_name="none"):
        self.window = window
        self.min_obs = min_obs
        self.factor_name = factor_name
        self.control_name = control_name

    def fit(self, returns: pd.DataFrame, factor: pd.Series, control: pd.Series | None = None):
        """
        Parameters
        ----------
        returns : DataFrame, dates x stocks, daily excess returns
        factor : Series of daily factor innovations
        control : Series of daily control innovations, optional
        """
        returns = returns.sort_index()
        dates = returns.index
        f = factor.reindex(dates).to_numpy(float)
        cols = [f]
        if control is not None:
            cols.append(control.reindex(dates).to_numpy(float))
        D = np.column_stack(cols)
        valid = np.isfinite(D).all(axis=1)
        R = returns.to_numpy(float)
        ids = returns.columns.to_numpy()
        ends = month_ends(dates)
        pos = dates.get_indexer(ends)

        def run(i):
            lo = max(0, i - self.window + 1)
            return _window_betas(R[lo:i + 1], D[lo:i + 1], valid[lo:i + 1], self.min_obs)

        results = map_ordered(run, list(pos), chunk=8)
        frames, diags = [], []
        for end, (coef, n, status) in zip(ends, results):
            ok = status == 0
            frames.append(pd.DataFrame({
                "stock_id": ids[ok], "as_of_month": end,
                "factor_name": self.factor_name, "control_name": self.control_name,
                "beta_cf": coef[ok, 1],
                "beta_control": coef[ok, 2] if control is not None else np.nan,
                "intercept": coef[ok, 0], "n_obs": n[ok],
            }))
            bad = (status == 2) | (status == 3)
            if bad.any():
                diags.append(pd.DataFrame({
                    "stock_id": ids[bad], "as_of_month": end,
                    "reason": [self.REASONS[s] for s in status[bad]],
                }))
        self.betas_ = (pd.concat(frames, ignore_index=True) if frames
                       else pd.DataFrame(columns=BETA_COLUMNS))[BETA_COLUMNS]
        self.diagnostics_ = (pd.concat(diags, ignore_index=True) if diags
                             else pd.DataFrame(columns=["stock_id", "as_of_month", "reason"]))
        for _, row in self.diagnostics_.iterrows():
            logger.info("skip %s at %s: %s", row.stock_id, row.as_of_month.date(), row.reason)
        return self


def estimate_betas(returns, factor_innovations, control_innovations=None, window=252,
                   min_obs=200, factor_name="CF", control_name=None) -> pd.DataFrame:
    """Month-end loadings on factor innovations and one control.

    Returns
    -------
    DataFrame with columns ``stock_id, as_of_month, factor_name,
    control_name, beta_cf, beta_control, intercept, n_obs``.
    """
    if control_name is None:
        control_name = "none" if control_innovations is None else \
            (control_innovations.name or "control")
    est = RollingBetas(window, min_obs, factor_name, control_name)
    return est.fit(returns, factor_innovations, control_innovations).betas_


def iter_estimates(betas: pd.DataFrame):
    for r in betas.itertuples(index=False):
        yield ExposureEstimate(r.stock_id, r.as_of_month, r.beta_cf, r.beta_control,
                               r.intercept, int(r.n_obs), r.factor_name, r.control_name)


# --------------------------------------------------------------------------
# control series

def market_return(stocks: pd.DataFrame) -> pd.Series:
    """Daily value-weighted excess return, weights from the previous day's caps."""
    ret = stocks.pivot(index="date", columns="stock_id", values="excess_return").sort_index()
    cap = stocks.pivot(index="date", columns="stock_id", values="market_cap").sort_index()
    w = cap.shift(1)
    w = w.where(ret.notna())
    out = (ret * w).sum(axis=1, min_count=1) / w.sum(axis=1, min_count=1)
    return out.rename("mkt")


def control_series(name: str, *, stocks: pd.DataFrame | None = None,
                   index_variance: pd.Series | None = None,
                   market_fear: pd.Series | None = None) -> pd.Series | None:
    """Daily control innovations.

    ``vix``: first difference of ``100 * sqrt(index total variance)``;
    ``mf``: market-fear innovations; ``mkt``: value-weighted excess market
    return; ``mcap`` and ``volume``: daily log change of aggregate market
    capitalisation and aggregate share volume.
    """
    if name in (None, "none"):
        return None
    if name == "vix":
        if index_variance is None:
            raise ValueError("vix control needs the index variance series")
        return (100.0 * np.sqrt(index_variance.clip(lower=0))).diff().rename("vix")
    if name == "mf":
        if market_fear is None:
            raise ValueError("mf control needs market-fear innovations")
        return market_fear.rename("mf")
    if stocks is None:
        raise ValueError(f"{name} control needs the stock file")
    if name == "mkt":
        return market_return(stocks)
    if name in ("mcap", "volume"):
        col = "market_cap" if name == "mcap" else "volume"
        agg = stocks.groupby("date")[col].sum(min_count=1).sort_index()
        return np.log(agg).diff().rename(name)
    raise ValueError(f"unknown control {name!r}; choose from {CONTROLS}")


def write_betas_csv(betas: pd.DataFrame, path) -> None:
    write_csv(betas[BETA_COLUMNS], path)


def read_betas_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, parse_dates=["as_of_month"], dtype={"stock_id": str})
    missing = set(BETA_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return df[BETA_COLUMNS]
