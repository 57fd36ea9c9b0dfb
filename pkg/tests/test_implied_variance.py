import dataclasses
import datetime as dt
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from fearfactor import implied_variance as iv
from fearfactor import market_data as md
from fearfactor import synth
from fearfactor.pipeline import spot_series

from conftest import integrated_variance

D0 = dt.date(2020, 1, 2)
T30 = 30 / 365


def chain_from(strikes, calls, mids, rate=0.0, days=30, spot=100.0):
    meta = md.ChainMeta("X", D0, D0 + dt.timedelta(days=days), spot, rate)
    mids = np.asarray(mids, float)
    return md.OptionChain.from_arrays(meta, strikes, calls, mids, mids)


def test_black_scholes_wide_grid_band():
    chain = synth.bs_chain(100, 0.0, 0.2, 30, 50, 150, 0.1, half_spread=0, tick=0)
    total = iv.compute_variance(chain).total
    assert 0.0392 <= total <= 0.0408


def test_zero_prices_give_zero_variance():
    chain = chain_from([90, 100, 100, 110], [False, False, True, True], [0, 0, 0, 0])
    obs = iv.compute_variance(chain, forward=100.0, k0=100.0)
    assert obs.total == obs.good == obs.bad == 0.0


def test_hand_computed_chain():
    # puts at 90, 95; straddle at 100; calls at 105, 110; F = 101, K0 = 100
    strikes = [90, 95, 100, 100, 105, 110]
    calls = [False, False, False, True, True, True]
    mids = [0.5, 1.2, 2.0, 3.0, 1.3, 0.6]
    r, T = 0.03, T30
    obs = iv.compute_variance(chain_from(strikes, calls, mids, rate=r), 101.0, 100.0)
    g = math.exp(r * T) * 2 / T
    put_terms = g * (5 / 90**2 * 0.5 + 5 / 95**2 * 1.2)
    at = g * 5 / 100**2 * 2.5
    call_terms = g * (5 / 105**2 * 1.3 + 5 / 110**2 * 0.6)
    corr = (101 / 100 - 1) ** 2 / T
    assert obs.total == pytest.approx(put_terms + at + call_terms - corr, rel=1e-14)
    assert obs.good == pytest.approx(call_terms + at / 2 - corr / 2, rel=1e-14)
    assert obs.bad == pytest.approx(put_terms + at / 2 - corr / 2, rel=1e-14)
    assert (obs.n_calls, obs.n_puts) == (3, 3)


def test_one_sided_chain_is_flagged_not_zeroed():
    chain = chain_from([100, 105, 110, 115], [True] * 4, [3, 1.5, 0.7, 0.3])
    obs = iv.compute_variance(chain, forward=100.0, k0=100.0)
    assert obs.degenerate
    assert obs.total > 0
    assert obs.good + obs.bad == pytest.approx(obs.total, abs=1e-15)


def test_negative_total_is_flagged():
    chain = chain_from([100, 100, 101, 102], [False, True, True, True],
                       [1e-6, 1e-6, 1e-6, 1e-6])
    obs = iv.compute_variance(chain, forward=110.0, k0=100.0)
    assert obs.total < 0 and obs.negative


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(10, 400), st.booleans(),
                          st.floats(0.0, 50.0, allow_nan=False)), min_size=1, max_size=30),
       st.integers(0, 29), st.floats(0.0, 5.0), st.floats(-0.02, 0.08))
def test_additivity_property(rows, k_pick, shift, rate):
    strikes = [float(k) for k, _, _ in rows]
    chain = chain_from(strikes, [c for _, c, _ in rows], [m for _, _, m in rows], rate)
    k0 = sorted(set(strikes))[k_pick % len(set(strikes))]
    obs = iv.compute_variance(chain, k0 + shift, k0)
    assert abs(obs.good + obs.bad - obs.total) <= 1e-12 * max(1.0, abs(obs.total))


@pytest.mark.parametrize("c", [0.01, 0.5, 3.0, 250.0])
def test_scale_invariance(c):
    base = synth.bs_chain(100, 0.02, 0.3, 30, 60, 150, 1.0)
    scaled = dataclasses.replace(base, spot=base.spot * c, strike=base.strike * c,
                                 bid=base.bid * c, ask=base.ask * c)
    a = iv.compute_variance(base)
    b = iv.compute_variance(scaled)
    assert b.total == pytest.approx(a.total, rel=1e-9)
    assert b.good == pytest.approx(a.good, rel=1e-9)


def test_refinement_ladder_shrinks_error():
    ref = integrated_variance(100.0, 0.01, 0.3, T30)
    errs = []
    for step in (4.0, 2.0, 1.0):
        chain = synth.bs_chain(100, 0.01, 0.3, 30, 40, 180, step, half_spread=0, tick=0)
        errs.append(abs(iv.compute_variance(chain).total - ref))
    assert errs[0] > errs[1] > errs[2]


def test_removing_deepest_quote_is_local():
    chain = md.filter_chain(synth.bs_chain(100, 0.01, 0.3, 30, 60, 150, 2.5))
    full = iv.compute_variance(chain)
    grid, contrib = iv.variance_contributions(chain, chain.k0)
    deepest = int(np.argmin(chain.strike))
    trimmed = chain.take(np.delete(np.arange(len(chain)), deepest))
    cut = iv.compute_variance(trimmed, chain.forward, chain.k0)
    assert abs(full.total - cut.total) <= contrib[0] + 1e-15


def test_strike_weights_boundaries():
    assert_allclose(iv._strike_weights(np.array([1.0, 2.0, 4.0, 7.0])), [1, 1.5, 2.5, 3])
    assert_allclose(iv._strike_weights(np.array([5.0])), [0.0])


# --------------------------------------------------------------------------
# panel

def obs(firm, day, total, good=None):
    good = total / 2 if good is None else good
    return iv.VarianceObservation(firm, D0 + dt.timedelta(days=day), total, good,
                                  total - good, 3, 3, 100.0, 100.0)


def test_dense_panel_and_duplicates():
    panel = iv.build_panel([obs("A", 0, 0.1), obs("B", 0, 0.2), obs("A", 1, 0.3),
                            obs("B", 1, 0.4)])
    assert panel.wide().shape == (2, 2)
    dup = iv.build_panel([obs("A", 0, 0.1), obs("A", 0, 0.5)])
    assert len(dup.warnings) == 1
    assert dup.wide().iloc[0, 0] == 0.5


def test_summary_of_constant_panel():
    panel = iv.build_panel([obs(f, d, 0.2) for f in "ABC" for d in range(4)])
    s = iv.panel_summary(panel)
    assert s.loc["Std", "total"] == pytest.approx(0.0, abs=1e-15)
    assert s.loc["Ave. Pairwise covariance", "total"] == pytest.approx(0.0, abs=1e-15)
    assert s.loc["Mean", "good"] == pytest.approx(0.1)


def test_summary_hand_panel():
    vals = {"A": [0.1, 0.2, 0.3, 0.2], "B": [0.2, 0.2, 0.4, 0.6], "C": [0.3, 0.1, 0.2, np.nan]}
    panel = iv.build_panel([obs(f, d, v) for f, vs in vals.items()
                            for d, v in enumerate(vs) if not np.isnan(v)])
    s = iv.panel_summary(panel)
    # daily cross-sections: (.1,.2,.3) (.2,.2,.1) (.3,.4,.2) (.2,.6)
    means = [0.2, 0.5 / 3, 0.3, 0.4]
    sds = [0.1, math.sqrt(((0.2 - 0.5 / 3) ** 2 * 2 + (0.1 - 0.5 / 3) ** 2) / 2), 0.1,
           math.sqrt(0.08)]
    assert s.loc["Mean", "total"] == pytest.approx(np.mean(means), rel=1e-12)
    assert s.loc["Std", "total"] == pytest.approx(np.mean(sds), rel=1e-12)

    def cov(x, y):
        x, y = np.array(x), np.array(y)
        ok = ~np.isnan(x) & ~np.isnan(y)
        x, y = x[ok], y[ok]
        return np.sum((x - x.mean()) * (y - y.mean())) / (len(x) - 1)

    pairs = [cov(vals["A"], vals["B"]), cov(vals["A"], vals["C"]), cov(vals["B"], vals["C"])]
    assert s.loc["Ave. Pairwise covariance", "total"] == pytest.approx(np.mean(pairs), rel=1e-12)


def test_single_firm_covariance_missing():
    s = iv.panel_summary(iv.build_panel([obs("A", d, 0.1 * d) for d in range(3)]))
    assert np.isnan(s.loc["Ave. Pairwise covariance", "total"])


def test_wide_drops_negative_cells():
    neg = iv.VarianceObservation("A", D0, -0.01, 0.0, -0.01, 1, 1, 1, 1, negative=True)
    panel = iv.build_panel([neg, obs("B", 0, 0.2)])
    assert np.isnan(panel.wide().loc[pd.Timestamp(D0), "A"])
    assert panel.wide(drop_negative=False).loc[pd.Timestamp(D0), "A"] == -0.01


def test_panel_csv_round_trip(tmp_path):
    panel = iv.build_panel([obs("A", 0, 0.1), obs("B", 1, 0.2)])
    iv.write_panel_csv(panel, tmp_path / "p.csv")
    back = iv.read_panel_csv(tmp_path / "p.csv")
    pd.testing.assert_frame_equal(back.wide(), panel.wide())


def test_batch_variance_matches_per_chain():
    market = synth.synthetic_market(synth.SyntheticSpec(seed=8, n_days=60, n_stocks=10,
                                                        n_firms=3, strike_grid="round"))
    spots = spot_series(market.stocks, market.index_prices)
    q, chains = md.chain_table(market.options, spots, market.rates)
    kept, accepted, _ = md.filter_quotes(q, chains)
    batch = iv.compute_variance_frame(kept, accepted)
    single = [iv.compute_variance(c)
              for c in map(md.filter_chain, md.iter_chains(market.options, spots, market.rates))
              if c]
    assert len(batch) == len(single) > 0
    for col in ("total", "good", "bad", "forward", "k0"):
        assert_allclose(batch[col].to_numpy(float), [getattr(o, col) for o in single],
                        rtol=1e-12, atol=1e-15)
    assert list(batch["n_calls"]) == [o.n_calls for o in single]
