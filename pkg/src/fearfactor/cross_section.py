"""Pricing factor exposures in the cross-section.

Newey-West and HAC kernels, the Shanken errors-in-variables multiplier,
Fama-MacBeth two-pass regressions, factor-mimicking portfolios and the
three-pass latent-factor estimator with its weak-factor Wald test.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats
from sklearn.base import BaseEstimator

from ._utils import InsufficientOverlap, write_csv

logger = logging.getLogger(__name__)

PREMIA_COLUMNS = ["spec_id", "factor_name", "lambda", "t_stat", "adj_r2",
                  "n_assets", "n_months", "wald_p"]


class RankDeficient(np.linalg.LinAlgError):
    """Second-pass design is numerically rank deficient."""


# --------------------------------------------------------------------------
# kernels

def bartlett_weights(lags: int) -> np.ndarray:
    return 1.0 - np.arange(1, lags + 1) / (lags + 1.0)


def newey_west_variance(series, lags: int = 12) -> float:
    """Newey-West variance of the sample mean of ``series``.

    ``(1/T^2) * [sum e_t^2 + 2 sum_j w_j sum_t e_t e_{t-j}]`` on the demeaned
    series with Bartlett weights ``w_j = 1 - j/(lags+1)``. With ``lags=0``
    this is the iid variance of the mean, ``var(ddof=0) / T``.
    """
    e = np.asarray(series, dtype=float).ravel()
    T = e.size
    if lags < 0:
        raise ValueError("lags must be non-negative")
    if lags >= T:
        raise ValueError(f"lags={lags} must be smaller than the series length {T}")
    e = e - e.mean()
    s = e @ e
    for j, w in enumerate(bartlett_weights(lags), start=1):
        s += 2.0 * w * (e[j:] @ e[:-j])
    return float(s / T**2)


def long_run_covariance(U, lags: int = 12, demean: bool = True) -> np.ndarray:
    """Bartlett long-run covariance ``Gamma_0 + sum_j w_j (Gamma_j + Gamma_j')``.

    ``U`` is (T, k); each ``Gamma_j = (1/T) sum_t u_t u_{t-j}'``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    T = U.shape[0]
    if lags >= T:
        raise ValueError(f"lags={lags} must be smaller than the series length {T}")
    if demean:
        U = U - U.mean(axis=0)
    S = U.T @ U / T
    for j, w in enumerate(bartlett_weights(lags), start=1):
        G = U[j:].T @ U[:-j] / T
        S += w * (G + G.T)
    return S


def ols(y, X):
    """Least-squares coefficients and residuals."""
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef, y - X @ coef


def hac_covariance(X, resid, lags: int = 12) -> np.ndarray:
    """Newey-West sandwich covariance of OLS coefficients (no small-sample scaling)."""
    X = np.asarray(X, float)
    T = X.shape[0]
    scores = X * np.asarray(resid, float)[:, None]
    S = long_run_covariance(scores, lags, demean=False) * T
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def shanken_multiplier(lam, factor_cov) -> float:
    """Errors-in-variables multiplier ``1 + lam' Sigma_f^{-1} lam``."""
    lam = np.atleast_1d(np.asarray(lam, float))
    S = np.atleast_2d(np.asarray(factor_cov, float))
    if S.shape != (lam.size, lam.size):
        raise ValueError("factor covariance shape does not match lambda")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("factor covariance is not positive definite") from exc
    return float(1.0 + lam @ np.linalg.solve(S, lam))


def mean_t_stat(series, lags: int = 12) -> tuple[float, float]:
    """Sample mean and its Newey-West t-statistic."""
    x = pd.Series(series).dropna().to_numpy(float)
    m = x.mean()
    v = newey_west_variance(x, min(lags, x.size - 1))
    return float(m), float(m / np.sqrt(v)) if v > 0 else np.nan


# --------------------------------------------------------------------------
# results

@dataclass
class RiskPremiumEstimate:
    """Premium of one factor in percent per month with its companions."""

    factor_name: str
    lam: float
    t_stat: float
    intercept: float
    t_intercept: float
    adj_r2: float
    n_assets: int
    n_months: int
    companions: dict = field(default_factory=dict)   # name -> (lambda, t)
    wald_p: float = np.nan
    n_latent_factors: int | None = None


def _align(*frames):
    joined = pd.concat(frames, axis=1, join="inner").dropna()
    out, start = [], 0
    for f in frames:
        k = f.shape[1] if f.ndim == 2 else 1
        out.append(joined.iloc[:, start:start + k])
        start += k
    return joined.index, out


def _as_frame(x, name="factor"):
    if isinstance(x, pd.Series):
        return x.to_frame(x.name or name)
    return x


# --------------------------------------------------------------------------
# Fama-MacBeth

class FamaMacBeth(BaseEstimator):
    """Two-pass regression with full-sample betas.

    Pass one regresses each asset on the factors over the full sample.
    Pass two regresses average returns on ``[1, beta]``; the point estimates
    come from that single regression. Standard errors apply Newey-West to the
    month-by-month cross-sectional estimates, scaled by the Shanken
    multiplier, plus ``Sigma_f / T`` for the factor premia.

    Attributes
    ----------
    lambdas_, se_, tstats_ : Series indexed by ``const`` and factor names
    betas_ : DataFrame (assets x factors)
    lambda_t_ : DataFrame of monthly cross-sectional estimates
    adj_r2_, r2_, shanken_c_, n_assets_, n_months_
    """

    def __init__(self, nw_lags=12, cond_max=1e12):
        self.nw_lags = nw_lags
        self.cond_max = cond_max

    def fit(self, assets: pd.DataFrame, factors):
        factors = _as_frame(factors)
        index, (R, F) = _align(assets, factors)
        T, N = R.shape
        K = F.shape[1]
        if N <= K + 1:
            raise ValueError(f"need more than {K + 1} assets, got {N}")
        if T <= max(self.nw_lags, K + 1):
            raise InsufficientOverlap(f"{T} months is too short")
        Rv, Fv = R.to_numpy(float), F.to_numpy(float)
        Xts = np.column_stack([np.ones(T), Fv])
        B, _ = ols(Rv, Xts)
        beta = B[1:].T                                      # (N, K)
        Xcs = np.column_stack([np.ones(N), beta])
        cond = np.linalg.cond(Xcs)
        if not np.isfinite(cond) or cond > self.cond_max:
            raise RankDeficient(f"beta matrix is rank deficient (condition number {cond:.3g})")
        rbar = Rv.mean(axis=0)
        lam, resid = ols(rbar, Xcs)
        lam_t, _ = ols(Rv.T, Xcs)                           # (K+1, T)
        lam_t = lam_t.T
        sigma_f = np.atleast_2d(np.cov(Fv, rowvar=False, ddof=0))
        c = shanken_multiplier(lam[1:], sigma_f)
        v_nw = np.array([newey_west_variance(lam_t[:, j], self.nw_lags)
                         for j in range(K + 1)])
        var = c * v_nw
        var[1:] += np.diag(sigma_f) / T
        sst = np.sum((rbar - rbar.mean()) ** 2)
        ssr = resid @ resid
        r2 = 1.0 - ssr / sst if sst > 0 else np.nan
        names = ["const"] + list(F.columns)
        self.lambdas_ = pd.Series(lam, index=names)
        self.se_ = pd.Series(np.sqrt(var), index=names)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.tstats_ = self.lambdas_ / self.se_
        self.betas_ = pd.DataFrame(beta, index=R.columns, columns=F.columns)
        self.lambda_t_ = pd.DataFrame(lam_t, index=index, columns=names)
        self.r2_ = float(r2)
        self.adj_r2_ = float(1.0 - (1.0 - r2) * (N - 1) / (N - K - 1))
        self.shanken_c_ = c
        self.n_assets_, self.n_months_ = N, T
        return self

    def estimate(self, factor_name=None, scale=100.0) -> RiskPremiumEstimate:
        """Estimate for ``factor_name`` (default: first factor), premia times ``scale``."""
        names = list(self.lambdas_.index[1:])
        name = factor_name or names[0]
        comp = {n: (scale * self.lambdas_[n], self.tstats_[n]) for n in names if n != name}
        return RiskPremiumEstimate(
            name, scale * self.lambdas_[name], self.tstats_[name],
            scale * self.lambdas_["const"], self.tstats_["const"], self.adj_r2_,
            self.n_assets_, self.n_months_, comp)


def fama_macbeth(test_asset_returns, pricing_factors, nw_lags=12, scale=100.0,
                 factor_name=None) -> RiskPremiumEstimate:
    """Fama-MacBeth premium of ``factor_name`` (default the first factor column).

    Returns are decimal; premia are reported times ``scale`` (percent).
    """
    est = FamaMacBeth(nw_lags).fit(test_asset_returns, pricing_factors)
    return est.estimate(factor_name, scale)


# --------------------------------------------------------------------------
# mimicking portfolio

@dataclass
class MimickingPortfolio:
    factor_name: str
    base_asset_ids: list
    weights: pd.Series
    daily_returns: pd.Series
    monthly_returns: pd.Series
    intercept: float = 0.0
    se: pd.Series | None = None
    dropped: list = field(default_factory=list)


class FactorMimicking(BaseEstimator):
    """Projection of a non-traded factor on base-asset returns.

    OLS of the factor on a constant and the base returns; the slopes are the
    portfolio weights. Collinear base assets are removed by a pivoted QR of
    the demeaned returns before the fit and get weight zero.
    """

    def __init__(self, min_overlap=252, rtol=1e-10):
        self.min_overlap = min_overlap
        self.rtol = rtol

    def fit(self, base_returns: pd.DataFrame, factor: pd.Series):
        index, (X, y) = _align(base_returns, factor)
        if len(index) < self.min_overlap:
            raise InsufficientOverlap(f"{len(index)} days of overlap, need {self.min_overlap}")
        Xv = X.to_numpy(float)
        yv = y.to_numpy(float).ravel()
        Xc = Xv - Xv.mean(axis=0)
        _, Rq, piv = linalg.qr(Xc, mode="economic", pivoting=True)
        d = np.abs(np.diag(Rq))
        rank = int(np.sum(d > self.rtol * max(d[0], 1e-300))) if d.size else 0
        keep = np.sort(piv[:rank])
        dropped = [X.columns[j] for j in sorted(piv[rank:])]
        if dropped:
            warnings.warn(f"collinear base assets dropped: {dropped}", stacklevel=2)
        D = np.column_stack([np.ones(len(yv)), Xv[:, keep]])
        coef, resid = ols(yv, D)
        dof = max(len(yv) - D.shape[1], 1)
        s2 = resid @ resid / dof
        cov = s2 * np.linalg.inv(D.T @ D)
        w = np.zeros(X.shape[1])
        se = np.full(X.shape[1], np.nan)
        w[keep] = coef[1:]
        se[keep] = np.sqrt(np.diag(cov)[1:])
        self.weights_ = pd.Series(w, index=X.columns)
        self.se_ = pd.Series(se, index=X.columns)
        self.intercept_ = float(coef[0])
        self.dropped_ = dropped
        return self

    def transform(self, base_returns: pd.DataFrame) -> pd.Series:
        return base_returns[self.weights_.index] @ self.weights_


def monthly_average(daily: pd.Series) -> pd.Series:
    """Within-month mean of daily values, dated at the last day of each month."""
    daily = daily.dropna()
    per = daily.index.to_period("M")
    out = daily.groupby(per).mean()
    ends = daily.index.to_series().groupby(per).max()
    out.index = pd.DatetimeIndex(ends.loc[out.index].to_numpy())
    return out


def mimicking_portfolio(factor_innovations: pd.Series, base_asset_returns: pd.DataFrame,
                        factor_name: str | None = None, min_overlap=252) -> MimickingPortfolio:
    est = FactorMimicking(min_overlap).fit(base_asset_returns, factor_innovations)
    daily = est.transform(base_asset_returns.dropna()).rename(factor_name or "mimicking")
    return MimickingPortfolio(
        factor_name or (factor_innovations.name or "factor"),
        list(base_asset_returns.columns), est.weights_, daily, monthly_average(daily),
        est.intercept_, est.se_, est.dropped_)


# --------------------------------------------------------------------------
# three-pass

def eigenvalue_ratio(returns, k_max=10) -> int:
    """Latent factor count maximising the ratio of adjacent eigenvalues."""
    R = np.asarray(returns, float)
    R = R - R.mean(axis=0)
    ev = np.linalg.svd(R, compute_uv=False) ** 2
    k_max = max(1, min(k_max, ev.size - 1))
    ev = ev[:k_max + 1]
    ratios = ev[:-1] / np.maximum(ev[1:], 1e-300 * ev[0])
    return int(np.argmax(ratios) + 1)


@dataclass
class ThreePassResult:
    lam: float
    t_stat: float
    weak_factor_p: float
    lambda_market: float
    t_market: float
    adj_r2: float
    n_latent_factors: int
    n_assets: int = 0
    n_months: int = 0
    lambdas: pd.Series = None
    tstats: pd.Series = None
    wald_stats: pd.Series = None
    wald_p: pd.Series = None
    gamma: np.ndarray = None


class ThreePass(BaseEstimator):
    """Three-pass risk premia robust to omitted factors.

    1. PCA of demeaned test-asset returns gives ``p`` latent factors ``v_t``
       (normalised so their sample covariance is the identity) and loadings.
    2. Average returns on ``[1, loadings]`` give the latent premia ``gamma``.
    3. Each demeaned observable is regressed on ``v_t``; its premium is
       ``eta @ gamma``.

    The variance of each premium is the Bartlett long-run variance of
    ``w_t * (v_t' gamma) + eta v_t`` over ``T``, where ``w_t`` is the pass-three
    residual. The weak-factor Wald statistic for an observable is
    ``T eta' Pi11^{-1} eta`` with ``Pi11`` the long-run covariance of
    ``w_t v_t``, asymptotically chi-squared with ``p`` degrees of freedom.

    Parameters
    ----------
    p : int or "auto"
        Latent factor count; "auto" uses the eigenvalue-ratio criterion.
    nw_lags : int
    k_max : int
        Upper bound for the automatic choice.
    """

    def __init__(self, p="auto", nw_lags=12, k_max=10):
        self.p = p
        self.nw_lags = nw_lags
        self.k_max = k_max

    def fit(self, assets: pd.DataFrame, observables):
        observables = _as_frame(observables)
        index, (R, G) = _align(assets, observables)
        Rv = R.to_numpy(float)
        Gv = G.to_numpy(float)
        T, N = Rv.shape
        p = eigenvalue_ratio(Rv, self.k_max) if self.p == "auto" else int(self.p)
        if p < 1:
            raise ValueError("p must be at least 1")
        if N < p + 2:
            raise ValueError(f"need at least p + 2 = {p + 2} assets, got {N}")
        rbar = Rv.mean(axis=0)
        Rt = Rv - rbar
        U, s, Vt = np.linalg.svd(Rt, full_matrices=False)
        if p > s.size or s[p - 1] <= 1e-12 * s[0]:
            raise np.linalg.LinAlgError(f"p={p} exceeds the numerical rank of the returns")
        V = np.sqrt(T) * U[:, :p]                           # (T, p), V'V/T = I
        beta = Rt.T @ V / T                                 # (N, p)
        X = np.column_stack([np.ones(N), beta])
        coef, resid = ols(rbar, X)
        gamma = coef[1:]
        sst = np.sum((rbar - rbar.mean()) ** 2)
        r2 = 1.0 - resid @ resid / sst if sst > 0 else np.nan
        adj = 1.0 - (1.0 - r2) * (N - 1) / (N - p - 1)

        Gt = Gv - Gv.mean(axis=0)
        eta = Gt.T @ V / T                                  # (d, p)
        W = Gt - V @ eta.T                                  # (T, d)
        lam = eta @ gamma
        vg = V @ gamma                                      # v_t' gamma (Sigma_v = I)
        lam_se, wald, wald_p = [], [], []
        for k in range(Gv.shape[1]):
            a = W[:, k] * vg + V @ eta[k]
            lam_se.append(np.sqrt(long_run_covariance(a, self.nw_lags)[0, 0] / T))
            Pi11 = long_run_covariance(W[:, k:k + 1] * V, self.nw_lags)
            try:
                stat = float(T * eta[k] @ np.linalg.solve(Pi11, eta[k]))
            except np.linalg.LinAlgError:
                # exact spanning or a constant observable leaves no residual
                stat = np.inf if np.any(eta[k] != 0) else 0.0
            wald.append(stat)
            wald_p.append(float(stats.chi2.sf(stat, p)))
        names = list(G.columns)
        self.lambdas_ = pd.Series(lam, index=names)
        self.se_ = pd.Series(lam_se, index=names)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.tstats_ = self.lambdas_ / self.se_
        self.wald_stats_ = pd.Series(wald, index=names)
        self.wald_p_ = pd.Series(wald_p, index=names)
        self.gamma_ = gamma
        self.eta_ = pd.DataFrame(eta, index=names)
        self.latent_ = pd.DataFrame(V, index=index)
        self.adj_r2_ = float(adj)
        self.n_latent_ = p
        self.n_assets_, self.n_months_ = N, T
        return self


def three_pass(test_asset_returns, observable_factor, market_factor=None, p="auto",
               nw_lags=12, scale=100.0) -> ThreePassResult:
    """Three-pass premium of an observable factor (and the market, if given).

    Premia are reported times ``scale`` (percent per month for decimal returns).
    """
    obs = _as_frame(observable_factor, "factor")
    frames = [obs]
    if market_factor is not None:
        frames.append(_as_frame(market_factor, "MKT"))
    G = pd.concat(frames, axis=1)
    est = ThreePass(p, nw_lags).fit(test_asset_returns, G)
    first = G.columns[0]
    mk = G.columns[-1] if market_factor is not None else None
    return ThreePassResult(
        lam=scale * est.lambdas_[first], t_stat=est.tstats_[first],
        weak_factor_p=est.wald_p_[first],
        lambda_market=scale * est.lambdas_[mk] if mk else np.nan,
        t_market=est.tstats_[mk] if mk else np.nan,
        adj_r2=est.adj_r2_, n_latent_factors=est.n_latent_,
        n_assets=est.n_assets_, n_months=est.n_months_,
        lambdas=scale * est.lambdas_, tstats=est.tstats_,
        wald_stats=est.wald_stats_, wald_p=est.wald_p_, gamma=est.gamma_,
    )


# --------------------------------------------------------------------------
# files

def premia_rows(spec_id: str, result, n_assets=None, n_months=None) -> pd.DataFrame:
    """premia.csv rows for a Fama-MacBeth estimate or a three-pass result."""
    rows = []
    if isinstance(result, RiskPremiumEstimate):
        rows.append((result.factor_name, result.lam, result.t_stat, result.wald_p))
        for name, (lam, t) in result.companions.items():
            rows.append((name, lam, t, np.nan))
        rows.append(("const", result.intercept, result.t_intercept, np.nan))
        adj, na, nm = result.adj_r2, result.n_assets, result.n_months
    elif isinstance(result, ThreePassResult):
        for name in result.lambdas.index:
            rows.append((name, result.lambdas[name], result.tstats[name], result.wald_p[name]))
        adj = result.adj_r2
        na = n_assets if n_assets is not None else result.n_assets
        nm = n_months if n_months is not None else result.n_months
    else:
        raise TypeError(f"unsupported result {type(result).__name__}")
    return pd.DataFrame([
        {"spec_id": spec_id, "factor_name": n, "lambda": lam, "t_stat": t,
         "adj_r2": adj, "n_assets": na, "n_months": nm, "wald_p": w}
        for n, lam, t, w in rows
    ], columns=PREMIA_COLUMNS)


def write_premia_csv(frame: pd.DataFrame, path) -> None:
    write_csv(frame[PREMIA_COLUMNS], path)
