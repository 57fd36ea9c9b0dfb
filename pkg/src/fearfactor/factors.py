"""Common factors from the implied-variance panel.

EM principal components on a rolling window, factor innovations,
orthogonalisation against market fears and rolling correlations.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._utils import InsufficientData, InsufficientOverlap, as_matrix, map_ordered, write_csv

logger = logging.getLogger(__name__)

FACTOR_NAMES = ("CF", "CF_plus", "CF_minus", "MF", "MF_plus", "MF_minus")
MEASURE_TO_CF = {"total": "CF", "good": "CF_plus", "bad": "CF_minus"}
MEASURE_TO_MF = {"total": "MF", "good": "MF_plus", "bad": "MF_minus"}
FACTOR_COLUMNS = ["name", "date", "level", "innovation", "variance_explained"]


class NotConverged(UserWarning):
    """EM stopped at ``max_iter``; the last iterate is still returned."""

    def __init__(self, n_iter, change):
        super().__init__(f"EM-PCA not converged after {n_iter} iterations "
                         f"(last change {change:.3g})")
        self.n_iter = n_iter
        self.change = change


@dataclass(frozen=True)
class WindowSpec:
    """Rolling window: ``length`` and ``step`` in trading days."""

    length: int = 252
    step: int = 1
    min_coverage: float = 0.8

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("window length must be at least 2")
        if self.step < 1:
            raise ValueError("window step must be at least 1")
        if not 0 < self.min_coverage <= 1:
            raise ValueError("min_coverage must lie in (0, 1]")


# --------------------------------------------------------------------------
# EM-PCA

@dataclass
class EMPCAResult:
    scores: np.ndarray            # (T, k)
    loadings: np.ndarray          # (N_eligible, k)
    variance_explained: np.ndarray
    columns: np.ndarray           # indices of eligible columns
    mean: np.ndarray
    scale: np.ndarray
    n_iter: int
    converged: bool
    objective: list = field(default_factory=list)


def _standardize(X, min_coverage):
    coverage = np.mean(~np.isnan(X), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(X, axis=0)
        sd = np.nanstd(X, axis=0)
    ok = (coverage >= min_coverage) & np.isfinite(sd) & (sd > 0)
    cols = np.flatnonzero(ok)
    Z = (X[:, cols] - mean[cols]) / sd[cols]
    return Z, cols, mean[cols], sd[cols]


def _rank_k(Z, k):
    """Top-k scores, loadings and all singular values via the smaller Gram matrix."""
    T, N = Z.shape
    if N <= T:
        w, V = np.linalg.eigh(Z.T @ Z)
        w, V = w[::-1], V[:, ::-1]
        Vk = V[:, :k]
        scores = Z @ Vk
    else:
        w, U = np.linalg.eigh(Z @ Z.T)
        w, U = w[::-1], U[:, ::-1]
        scores = U[:, :k] * np.sqrt(np.maximum(w[:k], 0.0))
        Vk = Z.T @ U[:, :k] / np.sqrt(np.maximum(w[:k], 1e-300))
    return scores, Vk, np.sqrt(np.maximum(w, 0.0))


def _em_fit(X, k, tol, max_iter, min_coverage, track=True):
    Z, cols, mean, sd = _standardize(X, min_coverage)
    if len(cols) < 2:
        raise InsufficientData(f"{len(cols)} eligible series, need at least 2")
    if k > min(Z.shape):
        raise ValueError(f"k={k} exceeds the window's rank bound {min(Z.shape)}")
    miss = np.isnan(Z)
    Z = np.where(miss, 0.0, Z)
    objective = []
    n_iter = 0
    converged = True
    change = 0.0
    scores, V, s = _rank_k(Z, k)
    if miss.any():
        converged = False
        recon = scores @ V.T
        obs = ~miss
        Zobs = np.where(obs, Z, 0.0)

        def obs_error(R):
            d = Zobs - np.where(obs, R, 0.0)
            return float(np.einsum("ij,ij->", d, d))

        for n_iter in range(1, max_iter + 1):
            if track:
                objective.append(obs_error(recon))
            np.copyto(Z, recon, where=miss)
            scores, V, s = _rank_k(Z, k)
            new = scores @ V.T
            d = new - recon
            change = np.sqrt(np.einsum("ij,ij->", d, d) /
                             max(np.einsum("ij,ij->", recon, recon), 1e-300))
            recon = new
            if change < tol:
                converged = True
                break
        if track:
            objective.append(obs_error(recon))
        np.copyto(Z, recon, where=miss)
        scores, V, s = _rank_k(Z, k)
        if not converged:
            warnings.warn(NotConverged(n_iter, change), stacklevel=3)

    ve = s[:k] ** 2 / np.sum(s**2)
    # sign convention: scores move with the cross-sectional mean of the input
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        xs_mean = np.nanmean(X[:, cols], axis=1)
    good = np.isfinite(xs_mean)
    for j in range(k):
        a = scores[good, j] - scores[good, j].mean()
        b = xs_mean[good] - xs_mean[good].mean()
        if a @ b < 0:
            scores[:, j] *= -1
            V[:, j] *= -1
    return EMPCAResult(scores, V, ve, cols, mean, sd, n_iter, converged, objective)


def _em_fit_batch(windows, tol, max_iter, min_coverage):
    """Rank-one EM-PCA on a stack of windows (W, L, N) at once.

    Same algorithm as :func:`_em_fit` with ``k=1``; a converged window is
    frozen while the others keep iterating. Ineligible columns are zeroed.

    Returns scores (W, L), variance explained (W,), valid (W,), converged (W,).
    """
    X = windows
    W, L, N = X.shape
    obs = ~np.isnan(X)
    cnt = obs.sum(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(X, axis=1)
        sd = np.nanstd(X, axis=1)
    elig = (cnt / L >= min_coverage) & np.isfinite(sd) & (sd > 0)
    valid = elig.sum(axis=1) >= 2
    safe_sd = np.where(elig, sd, 1.0)
    Z = np.where(obs & elig[:, None, :], (X - mean[:, None, :]) / safe_sd[:, None, :], 0.0)
    miss = ~obs & elig[:, None, :]

    def top(Zb):
        _, V = np.linalg.eigh(np.matmul(Zb.transpose(0, 2, 1), Zb))
        v = V[:, :, -1]
        return np.matmul(Zb, v[:, :, None])[:, :, 0], v

    # reconstruction is rank one, s v', so norms come from s and v alone
    wi, li, ni = np.nonzero(miss)
    s_prev, v_prev = top(Z)
    active = valid & miss.any(axis=(1, 2))
    converged = ~active
    for _ in range(max_iter):
        if not active.any():
            break
        sel = active[wi]
        Z[wi[sel], li[sel], ni[sel]] = s_prev[wi[sel], li[sel]] * v_prev[wi[sel], ni[sel]]
        s_new, v_new = top(Z)
        sign = np.where(np.einsum("wn,wn->w", v_new, v_prev) < 0, -1.0, 1.0)
        s_new *= sign[:, None]
        v_new *= sign[:, None]
        ds, dv = s_new - s_prev, v_new - v_prev
        ss_old = np.einsum("wl,wl->w", s_prev, s_prev)
        d2 = (np.einsum("wl,wl->w", ds, ds) + ss_old * np.einsum("wn,wn->w", dv, dv)
              + 2 * np.einsum("wl,wl->w", ds, s_prev) * np.einsum("wn,wn->w", v_new, dv))
        change = np.sqrt(np.maximum(d2, 0.0) / np.maximum(ss_old, 1e-300))
        s_prev = np.where(active[:, None], s_new, s_prev)
        v_prev = np.where(active[:, None], v_new, v_prev)
        done = active & (change < tol)
        converged |= done
        active &= ~done
    fill = (valid & miss.any(axis=(1, 2)))[wi]
    Z[wi[fill], li[fill], ni[fill]] = s_prev[wi[fill], li[fill]] * v_prev[wi[fill], ni[fill]]
    scores, v = top(Z)
    total = np.einsum("wln,wln->w", Z, Z)
    ve = np.where(total > 0, np.einsum("wl,wl->w", scores, scores) / np.maximum(total, 1e-300),
                  np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        xs = np.nanmean(np.where(elig[:, None, :], X, np.nan), axis=2)
    good = np.isfinite(xs)
    xs0 = np.where(good, xs, 0.0)
    cnt_t = np.maximum(good.sum(axis=1), 1)
    sc_c = np.where(good, scores - (np.where(good, scores, 0).sum(axis=1) / cnt_t)[:, None], 0)
    xs_c = np.where(good, xs0 - (xs0.sum(axis=1) / cnt_t)[:, None], 0)
    flip = np.einsum("wl,wl->w", sc_c, xs_c) < 0
    scores[flip] *= -1
    return scores, ve, valid, converged


class EMPCA(TransformerMixin, BaseEstimator):
    """Principal components of a panel with missing cells, filled by EM.

    Each column is standardised on its observed cells, missing cells start
    at zero, and the rank-``n_components`` reconstruction refills them
    until the relative Frobenius change of the reconstruction drops below
    ``tol``.

    Parameters
    ----------
    n_components : int
    tol : float
        Convergence threshold on the relative reconstruction change.
    max_iter : int
    min_coverage : float
        Columns observed on fewer than this fraction of rows are excluded.

    Attributes
    ----------
    scores_ : ndarray (n_samples, n_components)
    components_ : ndarray (n_components, n_eligible)
    explained_variance_ratio_ : ndarray
    columns_ : ndarray of int
        Input columns used in the fit.
    n_iter_, converged_
    """

    def __init__(self, n_components=1, tol=1e-8, max_iter=500, min_coverage=0.8):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.min_coverage = min_coverage

    def fit(self, X, y=None):
        if self.n_components < 1:
            raise ValueError("n_components must be at least 1")
        X = as_matrix(X)
        self.n_features_in_ = X.shape[1]
        r = _em_fit(X, self.n_components, self.tol, self.max_iter, self.min_coverage)
        self.scores_ = r.scores
        self.components_ = r.loadings.T
        self.explained_variance_ratio_ = r.variance_explained
        self.columns_ = r.columns
        self.mean_ = r.mean
        self.scale_ = r.scale
        self.n_iter_ = r.n_iter
        self.converged_ = r.converged
        self.objective_ = r.objective
        return self

    def transform(self, X):
        """Project standardised rows on the loadings (missing cells count as 0)."""
        check_is_fitted(self, "components_")
        X = as_matrix(X)
        Z = (X[:, self.columns_] - self.mean_) / self.scale_
        return np.where(np.isnan(Z), 0.0, Z) @ self.components_.T

    def fit_transform(self, X, y=None):
        return self.fit(X).scores_


def em_pca(panel_window, k=1, tol=1e-8, max_iter=500, min_coverage=0.8) -> dict:
    """EM-PCA of one window.

    Parameters
    ----------
    panel_window : DataFrame or array (dates x firms), NaN for missing
    k : int
        Number of components.

    Returns
    -------
    dict with ``factors`` (DataFrame or array of scores), ``loadings``,
    ``variance_explained``, ``n_iter`` and ``converged``.
    """
    est = EMPCA(k, tol=tol, max_iter=max_iter, min_coverage=min_coverage).fit(panel_window)
    scores, loadings = est.scores_, est.components_.T
    if isinstance(panel_window, pd.DataFrame):
        names = [f"pc{j + 1}" for j in range(k)]
        scores = pd.DataFrame(scores, index=panel_window.index, columns=names)
        loadings = pd.DataFrame(loadings, index=panel_window.columns[est.columns_],
                                columns=names)
    return {"factors": scores, "loadings": loadings,
            "variance_explained": est.explained_variance_ratio_,
            "n_iter": est.n_iter_, "converged": est.converged_}


# --------------------------------------------------------------------------
# rolling factor

@dataclass
class FactorSeries:
    """Dated factor levels; innovations are first differences of the levels."""

    name: str
    levels: pd.Series
    variance_explained: pd.Series | None = None
    innovations: pd.Series = field(init=False)

    def __post_init__(self):
        self.levels = self.levels.astype(float).rename(self.name)
        self.innovations = innovations(self.levels)
        if self.variance_explained is None:
            self.variance_explained = pd.Series(np.nan, index=self.levels.index)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self.levels.index)

    def monthly_innovations(self, how: str = "end") -> pd.Series:
        """Monthly innovations from month-end levels (``how='end'``) or monthly means."""
        lv = self.levels.dropna()
        g = lv.groupby(lv.index.to_period("M"))
        if how == "end":
            m = g.last()
        elif how == "mean":
            m = g.mean()
        else:
            raise ValueError("how must be 'end' or 'mean'")
        ends = lv.index.to_series().groupby(lv.index.to_period("M")).max()
        m.index = pd.DatetimeIndex(ends.loc[m.index].to_numpy())
        return m.diff().rename(self.name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "name": self.name, "date": self.levels.index,
            "level": self.levels.to_numpy(), "innovation": self.innovations.to_numpy(),
            "variance_explained": self.variance_explained.reindex(self.levels.index).to_numpy(),
        })


def innovations(levels: pd.Series) -> pd.Series:
    """First differences; missing wherever either neighbour is missing."""
    return levels.diff()


class RollingEMPCA(BaseEstimator):
    """Window-end EM-PCA scores over a trailing window.

    For every window end ``t`` (every ``step`` rows from ``length - 1``) the
    factor is estimated on rows ``t - length + 1 .. t`` and the score at ``t``
    is emitted, so a level dated ``t`` never uses later data. Window signs are
    chained: a window whose scores correlate negatively with the previous
    window's scores on the shared dates is flipped.

    Attributes
    ----------
    levels_ : Series
    variance_explained_ : Series
    n_missing_windows_ : int
    """

    def __init__(self, length=252, step=1, min_coverage=0.8, tol=1e-8, max_iter=500):
        self.length = length
        self.step = step
        self.min_coverage = min_coverage
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, panel: pd.DataFrame, y=None):
        WindowSpec(self.length, self.step, self.min_coverage)
        if not isinstance(panel, pd.DataFrame):
            panel = pd.DataFrame(as_matrix(panel))
        X = as_matrix(panel, min_samples=1)
        T = X.shape[0]
        if T < self.length:
            raise InsufficientData(f"panel has {T} dates, window needs {self.length}")
        ends = list(range(self.length - 1, T, self.step))

        view = np.lib.stride_tricks.sliding_window_view(X, self.length, axis=0)
        view = view.transpose(0, 2, 1)[::self.step]
        chunks = [list(range(i, min(i + 128, len(ends)))) for i in range(0, len(ends), 128)]

        def run(chunk):
            block = np.ascontiguousarray(view[chunk[0]:chunk[-1] + 1])
            return _em_fit_batch(block, self.tol, self.max_iter, self.min_coverage)

        results = []
        for sc, share, ok, conv in map_ordered(run, chunks, chunk=1):
            for i in range(sc.shape[0]):
                results.append((sc[i] if ok[i] else None, float(share[i]) if ok[i] else np.nan,
                                bool(ok[i] and not conv[i])))
        levels = np.full(T, np.nan)
        ve = np.full(T, np.nan)
        prev, prev_end = None, None
        n_missing = n_nc = 0
        for end, (scores, share, nc) in zip(ends, results):
            n_nc += nc
            if scores is None:
                n_missing += 1
                continue
            if prev is not None:
                lag = end - prev_end
                if lag < self.length:
                    a = scores[:self.length - lag]
                    b = prev[lag:]
                    if (a - a.mean()) @ (b - b.mean()) < 0:
                        scores = -scores
            levels[end] = scores[-1]
            ve[end] = share
            prev, prev_end = scores, end
        if n_missing:
            logger.info("%d of %d windows had insufficient data", n_missing, len(ends))
        if n_nc:
            logger.info("%d windows hit max_iter", n_nc)
        self.levels_ = pd.Series(levels, index=panel.index)
        self.variance_explained_ = pd.Series(ve, index=panel.index)
        self.n_missing_windows_ = n_missing
        self.n_not_converged_ = n_nc
        return self


def rolling_factor(panel: pd.DataFrame, spec: WindowSpec = WindowSpec(), name: str = "CF",
                   *, tol=1e-8, max_iter=500) -> FactorSeries:
    """Rolling window-end EM-PCA factor of ``panel`` (dates x firms)."""
    est = RollingEMPCA(spec.length, spec.step, spec.min_coverage, tol, max_iter).fit(panel)
    return FactorSeries(name, est.levels_, est.variance_explained_)


def full_sample_variance_explained(panel: pd.DataFrame, min_coverage=1e-12, **kw) -> float:
    """First-component variance share of the whole panel."""
    return float(em_pca(panel, 1, min_coverage=min_coverage, **kw)["variance_explained"][0])


def variance_explained_summary(factors: dict, full_sample: dict | None = None) -> pd.DataFrame:
    """Rolling variance-explained statistics in percent, one column per factor.

    Rows: Mean, Median, Min, Max, Std and, when ``full_sample`` is given,
    the full-sample share ``% variation``.
    """
    out = {}
    for name, fs in factors.items():
        v = 100.0 * fs.variance_explained.dropna()
        col = {"Mean": v.mean(), "Median": v.median(), "Min": v.min(),
               "Max": v.max(), "Std": v.std()}
        if full_sample is not None:
            col["% variation"] = 100.0 * full_sample.get(name, np.nan)
        out[name] = col
    return pd.DataFrame(out)


# --------------------------------------------------------------------------
# orthogonalisation and correlation

def _ols_resid(y, x):
    Xd = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(Xd, y, rcond=None)
    return y - Xd @ coef, coef


def orthogonalize(cf: FactorSeries, mf: FactorSeries, *, frequency: str = "daily",
                  min_overlap: int = 24) -> pd.Series:
    """Residuals of cf innovations regressed on a constant and mf innovations.

    ``frequency='monthly'`` uses month-end level differences.
    """
    if frequency == "daily":
        a, b = cf.innovations, mf.innovations
    elif frequency == "monthly":
        a, b = cf.monthly_innovations(), mf.monthly_innovations()
    else:
        raise ValueError("frequency must be 'daily' or 'monthly'")
    joined = pd.concat([a, b], axis=1, join="inner").dropna()
    if len(joined) < min_overlap:
        raise InsufficientOverlap(f"{len(joined)} overlapping observations, need {min_overlap}")
    y, x = joined.iloc[:, 0].to_numpy(), joined.iloc[:, 1].to_numpy()
    resid, _ = _ols_resid(y, x)
    # exact collinearity leaves rounding noise only
    resid[np.abs(resid) < 1e-14 * max(np.abs(y).max(), 1.0)] = 0.0
    return pd.Series(resid, index=joined.index, name=f"{cf.name}_orth")


def rolling_correlation(a: pd.Series, b: pd.Series, window: int = 252,
                        min_obs: int = 200) -> pd.Series:
    """Trailing-window Pearson correlation on jointly observed dates."""
    joined = pd.concat([a, b], axis=1, join="outer").sort_index()
    both = joined.notna().all(axis=1)
    x = joined.iloc[:, 0].where(both)
    y = joined.iloc[:, 1].where(both)
    return x.rolling(window, min_periods=min_obs).corr(y).clip(-1.0, 1.0)


# --------------------------------------------------------------------------
# files

def write_factors_csv(factors, path) -> None:
    frames = [f.to_frame() for f in factors]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=FACTOR_COLUMNS)
    write_csv(df[FACTOR_COLUMNS], path)


def read_factors_csv(path) -> dict:
    df = pd.read_csv(path, parse_dates=["date"])
    missing = set(FACTOR_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    out = {}
    for name, g in df.groupby("name", sort=False):
        g = g.set_index("date")
        out[name] = FactorSeries(name, g["level"], g["variance_explained"])
    return out
