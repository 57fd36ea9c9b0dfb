import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from fearfactor import exposures as ex
from fearfactor import market_data as md
from fearfactor import portfolio as pf
from fearfactor import synth
from fearfactor.cross_section import mean_t_stat
from fearfactor.pipeline import spot_series

from conftest import bs_price


# --------------------------------------------------------------------------
# Black-Scholes chains

def test_reference_call_price():
    call, put = synth.bs_prices(100.0, 100.0, 0.0, 0.2, 0.25)
    assert float(call) == pytest.approx(bs_price(100, 100, 0.0, 0.2, 0.25), abs=1e-12)
    assert float(call) == pytest.approx(3.9878, abs=5e-5)


def test_put_call_parity_on_chain():
    chain = synth.bs_chain(100, 0.03, 0.25, 30, 60, 140, 1.0, half_spread=0, tick=0)
    T = 30 / 365
    calls = chain.mid[chain.is_call]
    puts = chain.mid[~chain.is_call]
    k = chain.strike[chain.is_call]
    assert_allclose(calls - puts, 100 - k * math.exp(-0.03 * T), atol=1e-12)


def test_zero_vol_limit():
    chain = synth.bs_chain(100, 0.05, 1e-7, 30, 80, 120, 1.0, half_spread=0, tick=0)
    T = 30 / 365
    k = chain.strike[chain.is_call]
    assert_allclose(chain.mid[chain.is_call], np.maximum(100 - k * math.exp(-0.05 * T), 0),
                    atol=1e-8)


def test_chain_fields_and_spread():
    chain = synth.bs_chain(100, 0.0, 0.3, 30, 70, 130, 5.0)
    assert len(chain) == 2 * 13
    assert np.all(chain.bid > 0) and np.all(chain.ask > chain.bid)
    half = (chain.ask - chain.bid) / 2
    assert_allclose(half, np.minimum(np.maximum(0.01 * chain.mid, 0.01), 0.5 * chain.mid),
                    rtol=1e-12)
    assert np.all(chain.volume > 0) and np.all(chain.open_interest > 0)


def test_chain_errors():
    with pytest.raises(ValueError):
        synth.bs_chain(100, 0, 0.2, 30, 99, 101, 1.0)
    with pytest.raises(ValueError):
        synth.bs_chain(100, 0, 0.0, 30, 50, 150, 1.0)
    with pytest.raises(ValueError):
        synth.bs_chain(100, 0, 0.2, 30, 50, 150, 0.0)


def test_quote_spread_bounds():
    bid, ask = synth.quote_spread(np.array([0.005, 0.5, 50.0]), 0.01, 0.01)
    assert_allclose(bid, [0.0025, 0.49, 49.5])
    assert_allclose(ask, [0.0075, 0.51, 50.5])


# --------------------------------------------------------------------------
# RNG streams

def test_stream_determinism_and_independence():
    a = synth.stream(5, "stock", 3).standard_normal(1000)
    assert_allclose(a, synth.stream(5, "stock", 3).standard_normal(1000), rtol=0, atol=0)
    others = [synth.stream(5, "stock", 4), synth.stream(6, "stock", 3),
              synth.stream(5, "firm_var", 3)]
    for g in others:
        b = g.standard_normal(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.12
    assert isinstance(synth.stream(1, "x").bit_generator, np.random.Philox)


def test_generator_moments():
    x = synth.stream(1, "moments").standard_normal(100_000)
    assert abs(x.mean()) < 4 / math.sqrt(1e5)
    assert x.var() == pytest.approx(1.0, abs=0.015)
    f = synth._ar1(synth.stream(1, "ar"), 100_000, 0.9)
    assert f.std() == pytest.approx(1.0, abs=0.05)
    assert np.corrcoef(f[1:], f[:-1])[0, 1] == pytest.approx(0.9, abs=0.01)


# --------------------------------------------------------------------------
# specs

def test_spec_text_round_trip(tmp_path):
    spec = synth.SyntheticSpec(seed=3, n_firms=4, factor_shares=(0.6, 0.4), extra_expiry=True,
                               strike_grid="round", true_premium=-0.25)
    assert synth.SyntheticSpec.from_text(spec.to_text()) == spec
    spec.save(tmp_path / "s.txt")
    assert synth.SyntheticSpec.load(tmp_path / "s.txt") == spec


def test_spec_parsing_rules():
    spec = synth.SyntheticSpec.from_text("# comment\nseed = 9  # trailing\n\nextra_expiry=yes\n")
    assert spec.seed == 9 and spec.extra_expiry is True
    assert spec.n_firms == synth.SyntheticSpec().n_firms
    with pytest.raises(ValueError, match="unknown"):
        synth.SyntheticSpec.from_text("colour=red\n")
    with pytest.raises(ValueError):
        synth.SyntheticSpec.from_text("extra_expiry=maybe\n")


# --------------------------------------------------------------------------
# factor panels

def test_noiseless_panel_is_rank_one():
    out = synth.factor_panel(synth.SyntheticSpec(seed=2, n_firms=8, n_days=200, panel_noise=0.0))
    s = np.linalg.svd(out["panel"].to_numpy(), compute_uv=False)
    assert s[1] < 1e-12 * s[0]
    assert_allclose(out["panel"].to_numpy(),
                    out["true_factor"].to_numpy() @ out["loadings"].to_numpy().T, atol=1e-14)


def test_panel_mask_rate_and_shape():
    out = synth.factor_panel(synth.SyntheticSpec(seed=2, n_firms=50, n_days=2000,
                                                 missing_rate=0.1))
    assert out["panel"].shape == (2000, 50)
    assert out["panel"].isna().to_numpy().mean() == pytest.approx(0.1, abs=0.005)


def test_two_factor_shares():
    spec = synth.SyntheticSpec(seed=4, n_firms=40, n_days=500, n_factors=2, panel_noise=0.0)
    out = synth.factor_panel(spec)
    F = out["true_factor"].to_numpy()
    assert_allclose(F.T @ F / len(F), np.eye(2), atol=1e-12)
    x = out["panel"].to_numpy()
    ev = np.linalg.svd(x - x.mean(axis=0), compute_uv=False) ** 2
    assert_allclose(ev[:2] / ev.sum(), [0.7, 0.3], atol=0.02)


def test_panel_errors():
    with pytest.raises(ValueError):
        synth.factor_panel(synth.SyntheticSpec(n_firms=1))
    with pytest.raises(ValueError):
        synth.factor_panel(synth.SyntheticSpec(n_factors=3, n_days=50))


# --------------------------------------------------------------------------
# stock cross-sections

def test_noiseless_betas_recovered():
    spec = synth.SyntheticSpec(seed=5, n_days=300, n_stocks=8, idio_vol=0.0)
    out = synth.priced_cross_section(spec)
    ret = out["stocks"].pivot(index="date", columns="stock_id", values="excess_return")
    b = ex.estimate_betas(ret, out["fear_factor"], out["market"], min_obs=200)
    last = b[b["as_of_month"] == b["as_of_month"].max()].set_index("stock_id")
    assert_allclose(last["beta_cf"], out["betas"]["fear"].loc[last.index], atol=1e-10)
    assert_allclose(last["beta_control"], out["betas"]["market"].loc[last.index], atol=1e-10)


def test_null_economy_spread():
    spec = synth.SyntheticSpec(seed=12, n_days=1260, n_stocks=200, true_premium=0.0)
    out = synth.priced_cross_section(spec)
    p = pf.monthly_panels(out["stocks"])
    months = p["ret"].index
    betas = pd.concat([pd.DataFrame({"stock_id": out["betas"].index, "as_of_month": m,
                                     "beta_cf": out["betas"]["fear"].to_numpy()})
                       for m in months[:-1]], ignore_index=True)
    panel = pf.sort_portfolios(betas, p["ret"], p["cap"], pf.SortSpec(5))
    _, t = mean_t_stat(panel.spread, 12)
    assert abs(t) < 2


def test_prices_and_caps_consistent():
    out = synth.priced_cross_section(synth.SyntheticSpec(seed=1, n_days=60, n_stocks=5))
    s = out["stocks"]
    assert (s["price"] > 0).all() and (s["market_cap"] > 0).all()
    shares = s["market_cap"] / s["price"]
    assert_allclose(shares.groupby(s["stock_id"]).std(), 0, atol=1e-6 * shares.max())


# --------------------------------------------------------------------------
# full market

@pytest.fixture(scope="module")
def small_market():
    return synth.synthetic_market(synth.SyntheticSpec(seed=21, n_days=80, n_stocks=12,
                                                      n_firms=4))


def test_market_chains_pass_filters(small_market):
    m = small_market
    spots = spot_series(m.stocks, m.index_prices)
    chains = list(md.iter_chains(m.options, spots, m.rates))
    assert len(chains) > 0
    kept = [md.filter_chain(c) for c in chains]
    assert all(k for k in kept)


def test_market_is_reproducible(small_market):
    again = synth.synthetic_market(synth.SyntheticSpec(seed=21, n_days=80, n_stocks=12,
                                                       n_firms=4))
    pd.testing.assert_frame_equal(again.options, small_market.options)
    pd.testing.assert_frame_equal(again.stocks, small_market.stocks)
    pd.testing.assert_frame_equal(again.ff_factors, small_market.ff_factors)
    other = synth.synthetic_market(synth.SyntheticSpec(seed=22, n_days=80, n_stocks=12,
                                                       n_firms=4))
    assert not other.stocks["excess_return"].equals(small_market.stocks["excess_return"])


def test_market_files_layout(small_market):
    m = small_market
    assert set(m.options["underlying_id"]) == set(m.stocks["stock_id"].unique()[:4])
    assert list(m.ff_factors.columns) == pf.FF_COLUMNS
    dte = (m.options["expiry_date"] - m.options["quote_date"]).dt.days
    assert dte.between(23, 37).all()
    assert (m.index_options["underlying_id"] == "INDEX").all()
