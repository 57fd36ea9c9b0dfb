import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from fearfactor import exposures as ex


def brute_force_ols(y, X):
    """Normal equations solved with an explicit inverse, intercept first."""
    A = np.column_stack([np.ones(len(y)), X])
    return np.linalg.inv(A.T @ A) @ (A.T @ y)


def test_exact_linear_model(rng):
    T = 300
    idx = pd.bdate_range("2018-01-01", periods=T)
    dcf = pd.Series(rng.standard_normal(T), index=idx)
    ctrl = pd.Series(rng.standard_normal(T), index=idx)
    ctrl -= np.polyval(np.polyfit(dcf, ctrl, 1), dcf)
    returns = pd.DataFrame({"A": 2 * dcf + 0.001})
    b = ex.estimate_betas(returns, dcf, ctrl, window=252, min_obs=200)
    assert len(b) > 0
    assert_allclose(b["beta_cf"], 2.0, atol=1e-10)
    assert_allclose(b["intercept"], 0.001, atol=1e-10)
    assert_allclose(b["beta_control"], 0.0, atol=1e-10)
    assert (b["n_obs"] >= 200).all()


def test_known_betas_within_three_se(rng):
    T = 252
    idx = pd.bdate_range("2018-01-01", periods=T)
    x1, x2 = rng.standard_normal(T), rng.standard_normal(T)
    e = 0.5 * rng.standard_normal(T)
    y = 0.01 - 0.5 * x1 + 1.2 * x2 + e
    b = ex.estimate_betas(pd.DataFrame({"A": y}, index=idx), pd.Series(x1, index=idx),
                          pd.Series(x2, index=idx), window=252, min_obs=200)
    last = b.iloc[-1]
    A = np.column_stack([np.ones(T), x1, x2])
    resid = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
    se = np.sqrt(np.diag(resid @ resid / (T - 3) * np.linalg.inv(A.T @ A)))
    assert abs(last.beta_cf + 0.5) < 3 * se[1]
    assert abs(last.beta_control - 1.2) < 3 * se[2]


def test_constant_return_is_skipped(rng):
    T = 260
    idx = pd.bdate_range("2018-01-01", periods=T)
    f = pd.Series(rng.standard_normal(T), index=idx)
    returns = pd.DataFrame({"flat": np.full(T, 0.01), "live": rng.standard_normal(T)},
                           index=idx)
    est = ex.RollingBetas(window=252, min_obs=200).fit(returns, f)
    assert set(est.betas_["stock_id"]) == {"live"}
    assert set(est.diagnostics_["reason"]) == {"constant_response"}


def test_constant_regressor_is_singular(rng):
    T = 260
    idx = pd.bdate_range("2018-01-01", periods=T)
    returns = pd.DataFrame({"A": rng.standard_normal(T)}, index=idx)
    est = ex.RollingBetas(window=252, min_obs=200).fit(returns, pd.Series(1.0, index=idx))
    assert est.betas_.empty
    assert set(est.diagnostics_["reason"]) == {"singular_design"}


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_solver(seed):
    g = np.random.default_rng(seed)
    T, N = 40, 6
    R = g.standard_normal((T, N))
    D = g.standard_normal((T, 2))
    R[g.random((T, N)) < 0.2] = np.nan
    valid = g.random(T) > 0.1
    coef, n, status = ex._window_betas(R, D, valid, min_obs=10)
    for j in range(N):
        ok = valid & ~np.isnan(R[:, j])
        assert n[j] == ok.sum()
        assert status[j] == 0
        assert_allclose(coef[j], brute_force_ols(R[ok, j], D[ok]), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("c", [0.5, 10.0])
def test_factor_scaling(rng, c):
    T = 300
    idx = pd.bdate_range("2018-01-01", periods=T)
    f = pd.Series(rng.standard_normal(T), index=idx)
    returns = pd.DataFrame(rng.standard_normal((T, 4)) + f.to_numpy()[:, None], index=idx)
    a = ex.estimate_betas(returns, f, min_obs=200)
    b = ex.estimate_betas(returns, f * c, min_obs=200)
    assert_allclose(b["beta_cf"], a["beta_cf"] / c, rtol=1e-12)
    assert_allclose(b["intercept"], a["intercept"], rtol=1e-9, atol=1e-15)


def test_window_discipline(rng):
    T = 400
    idx = pd.bdate_range("2018-01-01", periods=T)
    f = pd.Series(rng.standard_normal(T), index=idx)
    returns = pd.DataFrame({"A": rng.standard_normal(T) + 0.7 * f.to_numpy()}, index=idx)
    base = ex.estimate_betas(returns, f, window=126, min_obs=100)
    # perturb an observation older than every window ending after it
    shocked = returns.copy()
    shocked.iloc[10, 0] += 5.0
    alt = ex.estimate_betas(shocked, f, window=126, min_obs=100)
    late = base["as_of_month"] > idx[10 + 126 + 25]
    assert late.any()
    assert_allclose(alt.loc[late, "beta_cf"], base.loc[late, "beta_cf"], rtol=1e-12)
    assert not np.allclose(alt.loc[~late, "beta_cf"].iloc[:1], base.loc[~late, "beta_cf"].iloc[:1])


def test_min_obs_threshold(rng):
    T = 260
    idx = pd.bdate_range("2018-01-01", periods=T)
    f = pd.Series(rng.standard_normal(T), index=idx)
    r = rng.standard_normal(T)
    r[:100] = np.nan
    b = ex.estimate_betas(pd.DataFrame({"A": r}, index=idx), f, window=252, min_obs=200)
    assert b.empty
    b = ex.estimate_betas(pd.DataFrame({"A": r}, index=idx), f, window=252, min_obs=150)
    assert (b["n_obs"] >= 150).all() and len(b) > 0


def test_month_end_dating(rng):
    idx = pd.bdate_range("2018-01-01", "2019-03-31")
    f = pd.Series(rng.standard_normal(len(idx)), index=idx)
    b = ex.estimate_betas(pd.DataFrame({"A": rng.standard_normal(len(idx))}, index=idx), f,
                          window=60, min_obs=40)
    ends = pd.Series(idx).groupby(idx.to_period("M")).max()
    assert set(b["as_of_month"]) <= set(ends)
    assert list(b.columns) == ex.BETA_COLUMNS


def test_control_series(rng):
    dates = pd.bdate_range("2020-01-01", periods=3)
    stocks = pd.DataFrame({
        "date": np.repeat(dates, 2), "stock_id": ["a", "b"] * 3,
        "excess_return": [0.01, 0.03, 0.02, -0.01, 0.0, 0.04],
        "market_cap": [100.0, 300.0, 200.0, 200.0, 150.0, 50.0],
        "volume": [10.0, 30.0, 20.0, 20.0, 10.0, 10.0],
    })
    mkt = ex.control_series("mkt", stocks=stocks)
    assert np.isnan(mkt.iloc[0])
    assert mkt.iloc[1] == pytest.approx((100 * 0.02 + 300 * -0.01) / 400)
    assert mkt.iloc[2] == pytest.approx((200 * 0.0 + 200 * 0.04) / 400)
    mcap = ex.control_series("mcap", stocks=stocks)
    assert_allclose(mcap.to_numpy(), [np.nan, 0.0, np.log(200 / 400)])
    vix = ex.control_series("vix", index_variance=pd.Series([0.04, 0.09], index=dates[:2]))
    assert_allclose(vix.to_numpy(), [np.nan, 10.0])
    assert ex.control_series("none") is None
    with pytest.raises(ValueError):
        ex.control_series("bogus", stocks=stocks)
    with pytest.raises(ValueError):
        ex.control_series("vix")


def test_betas_csv_round_trip(tmp_path, rng):
    T = 300
    idx = pd.bdate_range("2018-01-01", periods=T)
    f = pd.Series(rng.standard_normal(T), index=idx)
    b = ex.estimate_betas(pd.DataFrame(rng.standard_normal((T, 3)), index=idx,
                                       columns=["x", "y", "z"]), f, min_obs=200)
    ex.write_betas_csv(b, tmp_path / "b.csv")
    back = ex.read_betas_csv(tmp_path / "b.csv")
    assert_allclose(back["beta_cf"], b["beta_cf"], rtol=1e-10)
    assert list(back["stock_id"]) == list(b["stock_id"])
    est = list(ex.iter_estimates(b))
    assert est[0].beta_cf == b["beta_cf"].iloc[0]
