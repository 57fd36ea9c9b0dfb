import warnings

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from numpy.testing import assert_allclose

from fearfactor import cross_section as cs
from fearfactor._utils import InsufficientOverlap

from conftest import brute_force_nw


def months(T):
    return pd.date_range("1980-01-31", periods=T, freq="ME")


def priced_panel(rng, T=240, N=25, lam=(-0.004,), noise=0.0):
    """Returns with exact betas and premia; factors are demeaned draws."""
    K = len(lam)
    F = rng.normal(0, 0.03, (T, K))
    F -= F.mean(axis=0)
    B = rng.uniform(-1.5, 1.5, (N, K))
    E = noise * rng.standard_normal((T, N))
    if noise:
        E -= E.mean(axis=0)
        E -= F @ np.linalg.lstsq(F, E, rcond=None)[0]
    R = 0.002 + B @ np.asarray(lam) + F @ B.T + E
    idx = months(T)
    names = [f"f{k}" for k in range(K)]
    return (pd.DataFrame(R, index=idx, columns=[f"p{i}" for i in range(N)]),
            pd.DataFrame(F, index=idx, columns=names), B)


# --------------------------------------------------------------------------
# kernels

def test_nw_lag_zero_is_iid(rng):
    x = rng.standard_normal(100)
    assert cs.newey_west_variance(x, 0) == pytest.approx(x.var() / x.size, rel=1e-14)


def test_nw_matches_double_sum_and_time_reversal(rng):
    for lags in (1, 5, 12):
        x = rng.standard_normal(80)
        assert cs.newey_west_variance(x, lags) == pytest.approx(brute_force_nw(x, lags), rel=1e-10)
        assert cs.newey_west_variance(x[::-1], lags) == pytest.approx(
            cs.newey_west_variance(x, lags), rel=1e-12)


def test_nw_ar1_exceeds_naive(rng):
    T = 5000
    e = rng.standard_normal(T)
    x = np.empty(T)
    x[0] = e[0]
    for t in range(1, T):
        x[t] = 0.5 * x[t - 1] + e[t]
    hac = cs.newey_west_variance(x, 30)
    naive = cs.newey_west_variance(x, 0)
    assert hac > naive
    # long-run to short-run ratio (1 + rho) / (1 - rho) = 3, Bartlett-truncated
    assert 2.4 < hac / naive < 3.2


def test_nw_rejects_long_lags():
    with pytest.raises(ValueError):
        cs.newey_west_variance(np.ones(5), 5)
    with pytest.raises(ValueError):
        cs.newey_west_variance(np.ones(5), -1)


def test_long_run_covariance_diagonal(rng):
    U = rng.standard_normal((60, 3))
    S = cs.long_run_covariance(U, 4)
    for k in range(3):
        assert S[k, k] == pytest.approx(60 * cs.newey_west_variance(U[:, k], 4), rel=1e-12)
    assert_allclose(S, S.T, atol=1e-15)


def test_hac_covariance_matches_statsmodels(rng):
    T = 200
    X = sm.add_constant(rng.standard_normal((T, 2)))
    y = X @ [0.1, 0.5, -0.2] + rng.standard_normal(T)
    coef, resid = cs.ols(y, X)
    ref = sm.OLS(y, X).fit(cov_type="HAC", cov_kwds={"maxlags": 6, "use_correction": False})
    assert_allclose(coef, ref.params, rtol=1e-12)
    assert_allclose(cs.hac_covariance(X, resid, 6), ref.cov_params(), rtol=1e-10)


def test_shanken_multiplier_cases():
    assert cs.shanken_multiplier([0.0], [[0.04]]) == 1.0
    assert cs.shanken_multiplier(0.1, 0.04) == pytest.approx(1.25, abs=1e-15)
    assert cs.shanken_multiplier([0.1, 0.2], np.diag([0.04, 0.01])) == pytest.approx(5.25)
    with pytest.raises(np.linalg.LinAlgError):
        cs.shanken_multiplier([0.1, 0.2], [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        cs.shanken_multiplier([0.1], np.eye(2))


def test_mean_t_stat(rng):
    x = pd.Series(rng.normal(0.5, 1, 120))
    m, t = cs.mean_t_stat(x, 12)
    assert m == pytest.approx(x.mean())
    assert t == pytest.approx(x.mean() / np.sqrt(brute_force_nw(x.to_numpy(), 12)), rel=1e-10)


# --------------------------------------------------------------------------
# Fama-MacBeth

def test_fmb_noiseless_two_factor(rng):
    R, F, _ = priced_panel(rng, lam=(-0.004, 0.006))
    est = cs.FamaMacBeth().fit(R, F)
    assert_allclose(est.lambdas_[["f0", "f1"]], [-0.004, 0.006], atol=1e-12)
    assert est.lambdas_["const"] == pytest.approx(0.002, abs=1e-12)
    assert est.adj_r2_ == pytest.approx(1.0, abs=1e-10)


def test_fmb_point_estimate_is_single_regression(rng):
    R, F, _ = priced_panel(rng, noise=0.01)
    est = cs.FamaMacBeth().fit(R, F)
    X = sm.add_constant(sm.OLS(R.to_numpy(), sm.add_constant(F.to_numpy())).fit().params[1:].T)
    ref = sm.OLS(R.mean().to_numpy(), X).fit()
    assert_allclose(est.lambdas_.to_numpy(), ref.params, rtol=1e-10)
    assert est.adj_r2_ == pytest.approx(ref.rsquared_adj, rel=1e-10)
    assert_allclose(est.lambda_t_.mean().to_numpy(), ref.params, rtol=1e-8, atol=1e-14)


def test_fmb_standard_error_assembly(rng):
    R, F, _ = priced_panel(rng, noise=0.01)
    est = cs.FamaMacBeth(nw_lags=12).fit(R, F)
    lam = est.lambdas_["f0"]
    sf = F["f0"].var(ddof=0)
    c = 1 + lam**2 / sf
    v = c * brute_force_nw(est.lambda_t_["f0"].to_numpy(), 12) + sf / len(R)
    assert est.se_["f0"] == pytest.approx(np.sqrt(v), rel=1e-10)
    assert est.shanken_c_ == pytest.approx(c, rel=1e-12)


@pytest.mark.parametrize("c", [0.25, 7.0])
def test_fmb_factor_rescaling(rng, c):
    R, F, _ = priced_panel(rng, lam=(-0.004, 0.003), noise=0.01)
    a = cs.FamaMacBeth().fit(R, F)
    b = cs.FamaMacBeth().fit(R, F.assign(f0=F["f0"] * c))
    assert b.lambdas_["f0"] == pytest.approx(a.lambdas_["f0"] * c, rel=1e-9)
    assert b.lambdas_["f1"] == pytest.approx(a.lambdas_["f1"], rel=1e-9)
    assert_allclose(b.tstats_.to_numpy(), a.tstats_.to_numpy(), rtol=1e-9)


def test_fmb_rank_deficient(rng):
    R, F, _ = priced_panel(rng)
    F2 = F.assign(f1=F["f0"] * 2.0)
    with pytest.raises(cs.RankDeficient, match="condition number"):
        cs.FamaMacBeth().fit(R, F2)
    with pytest.raises(ValueError):
        cs.FamaMacBeth().fit(R.iloc[:, :2], F)
    with pytest.raises(InsufficientOverlap):
        cs.FamaMacBeth().fit(R.iloc[:10], F.iloc[:10])


def test_fama_macbeth_wrapper(rng):
    R, F, _ = priced_panel(rng, lam=(-0.004, 0.003), noise=0.01)
    est = cs.fama_macbeth(R, F, factor_name="f1")
    fit = cs.FamaMacBeth().fit(R, F)
    assert est.lam == pytest.approx(100 * fit.lambdas_["f1"])
    assert est.t_stat == pytest.approx(fit.tstats_["f1"])
    assert set(est.companions) == {"f0"}
    rows = cs.premia_rows("spec", est)
    assert list(rows.columns) == cs.PREMIA_COLUMNS
    assert list(rows["factor_name"]) == ["f1", "f0", "const"]


# --------------------------------------------------------------------------
# mimicking portfolios

def daily_base(rng, T=600, N=5):
    idx = pd.bdate_range("2015-01-01", periods=T)
    return pd.DataFrame(rng.normal(0, 0.01, (T, N)), index=idx,
                        columns=[f"q{i}" for i in range(1, N + 1)])


def test_mimicking_indicator_recovery(rng):
    X = daily_base(rng)
    mp = cs.mimicking_portfolio(X["q3"].rename("CF"), X)
    assert_allclose(mp.weights.to_numpy(), [0, 0, 1, 0, 0], atol=1e-10)
    assert_allclose(mp.daily_returns, X["q3"], atol=1e-12)


def test_mimicking_half_half_within_three_se(rng):
    X = daily_base(rng)
    f = 0.5 * X["q1"] + 0.5 * X["q2"] + rng.normal(0, 0.002, len(X))
    mp = cs.mimicking_portfolio(f, X)
    assert np.all(np.abs(mp.weights - [0.5, 0.5, 0, 0, 0]) < 3 * mp.se)


def test_mimicking_orthogonal_factor(rng):
    X = daily_base(rng)
    mp = cs.mimicking_portfolio(pd.Series(rng.standard_normal(len(X)), index=X.index), X)
    assert np.all(np.abs(mp.weights) < 3 * mp.se)


def test_mimicking_collinear_drop(rng):
    X = daily_base(rng)
    X["q5"] = X["q1"] + X["q2"]
    with pytest.warns(UserWarning, match="collinear"):
        mp = cs.mimicking_portfolio(X["q3"], X)
    assert len(mp.dropped) == 1
    assert mp.weights[mp.dropped[0]] == 0.0
    assert mp.weights["q3"] == pytest.approx(1.0, abs=1e-10)


def test_mimicking_monthly_average(rng):
    X = daily_base(rng, T=300)
    mp = cs.mimicking_portfolio(X["q2"] - X["q4"], X)
    ref = mp.daily_returns.groupby(mp.daily_returns.index.to_period("M")).mean()
    assert_allclose(mp.monthly_returns.to_numpy(), ref.to_numpy(), rtol=1e-12)
    assert mp.monthly_returns.index[0] == X.index[X.index < "2015-02-01"][-1]
    with pytest.raises(InsufficientOverlap):
        cs.mimicking_portfolio(X["q1"].iloc[:100], X.iloc[:100])


# --------------------------------------------------------------------------
# three-pass

def latent_economy(rng, T=360, N=25, p=3, gamma=(0.005, 0.002, -0.003)):
    V = rng.standard_normal((T, p)) * 0.03
    B = rng.uniform(-1, 1.5, (N, p))
    R = 0.001 + B @ np.asarray(gamma[:p]) + V @ B.T + 0.005 * rng.standard_normal((T, N))
    return pd.DataFrame(R, index=months(T)), V


def test_three_pass_first_latent_exact(rng):
    R, _ = latent_economy(rng)
    est = cs.ThreePass(p=3).fit(R, pd.Series(0.0, index=R.index, name="g"))
    assert est.wald_p_["g"] == 1.0 and est.lambdas_["g"] == 0.0
    g = pd.Series(est.latent_[0].to_numpy(), index=R.index, name="g")
    est = cs.ThreePass(p=3).fit(R, g)
    assert est.lambdas_["g"] == pytest.approx(est.gamma_[0], rel=1e-10)
    assert est.wald_p_["g"] < 1e-12


def test_three_pass_latent_normalisation(rng):
    R, _ = latent_economy(rng)
    est = cs.ThreePass(p=3).fit(R, pd.Series(rng.standard_normal(len(R)), index=R.index))
    V = est.latent_.to_numpy()
    assert_allclose(V.T @ V / len(V), np.eye(3), atol=1e-10)
    assert_allclose(V.mean(axis=0), 0, atol=1e-12)


def test_three_pass_eigenvalue_ratio(rng):
    R, _ = latent_economy(rng, p=3)
    assert cs.eigenvalue_ratio(R.to_numpy()) in (1, 2, 3)
    R1, _ = latent_economy(rng, p=1, gamma=(0.005,))
    assert cs.eigenvalue_ratio(R1.to_numpy()) == 1


def test_three_pass_affine_observable_invariance(rng):
    R, V = latent_economy(rng)
    g = pd.Series(V @ [1.0, 0.3, 0.0] + 0.01 * rng.standard_normal(len(R)), index=R.index)
    a = cs.three_pass(R, g, p=3)
    b = cs.three_pass(R, 3.0 + 0.5 * g, p=3)
    c = cs.three_pass(R, -2.0 * g, p=3)
    assert b.lam == pytest.approx(0.5 * a.lam, rel=1e-9)
    assert c.lam == pytest.approx(-2.0 * a.lam, rel=1e-9)
    for other in (b, c):
        assert abs(other.t_stat) == pytest.approx(abs(a.t_stat), rel=1e-9)
        assert other.weak_factor_p == pytest.approx(a.weak_factor_p, rel=1e-9, abs=1e-300)
        assert other.adj_r2 == pytest.approx(a.adj_r2, rel=1e-12)


def test_three_pass_agrees_with_fmb_when_spanned(rng):
    R, F, _ = priced_panel(rng, lam=(-0.004,))
    tp = cs.ThreePass(p=1).fit(R, F)
    fmb = cs.FamaMacBeth().fit(R, F)
    assert tp.lambdas_["f0"] == pytest.approx(fmb.lambdas_["f0"], abs=1e-8)


def test_three_pass_market_and_rows(rng):
    R, V = latent_economy(rng)
    g = pd.Series(V[:, 1], index=R.index, name="CF")
    mkt = pd.Series(V[:, 0], index=R.index)
    res = cs.three_pass(R, g, mkt, p=3)
    assert np.isfinite(res.lambda_market) and 0 <= res.weak_factor_p <= 1
    assert res.n_latent_factors == 3 and res.n_assets == 25
    rows = cs.premia_rows("tp", res)
    assert list(rows["factor_name"]) == ["CF", "MKT"]
    assert rows["wald_p"].between(0, 1).all()


def test_three_pass_errors(rng):
    R, _ = latent_economy(rng, N=5, p=3)
    g = pd.Series(rng.standard_normal(len(R)), index=R.index)
    with pytest.raises(ValueError):
        cs.ThreePass(p=4).fit(R, g)
    with pytest.raises(ValueError):
        cs.ThreePass(p=0).fit(R, g)
    low = pd.DataFrame(np.outer(rng.standard_normal(len(R)), np.ones(6)), index=R.index)
    with pytest.raises(np.linalg.LinAlgError):
        cs.ThreePass(p=2).fit(low, g)


def test_premia_csv(tmp_path, rng):
    R, F, _ = priced_panel(rng, noise=0.01)
    rows = cs.premia_rows("a", cs.fama_macbeth(R, F))
    cs.write_premia_csv(rows, tmp_path / "p.csv")
    back = pd.read_csv(tmp_path / "p.csv")
    assert list(back.columns) == cs.PREMIA_COLUMNS
    with pytest.raises(TypeError):
        cs.premia_rows("x", object())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cs.premia_rows("a", cs.fama_macbeth(R, F))
