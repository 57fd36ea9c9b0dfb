"""Stage functions shared by the CLI and in-memory runs.

Every stage takes and returns plain frames so ``pipeline`` and the
individual subcommands run exactly the same code.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import cross_section as cs
from . import exposures as ex
from . import factors as fa
from . import implied_variance as iv
from . import market_data as md
from . import portfolio as pf

logger = logging.getLogger(__name__)

FACTOR_TO_MEASURE = {"CF": "total", "CF_plus": "good", "CF_minus": "bad"}


@dataclass
class RunConfig:
    """Run settings; defaults are 252-day windows, quintiles and 12 Newey-West lags."""

    data_dir: str = "."
    options: str = "options.csv"
    index_options: str = "index_options.csv"
    stocks: str = "stocks.csv"
    index_prices: str = "index_prices.csv"
    rates: str = "rates.csv"
    ff_factors: str = "ff_factors.csv"
    out_dir: str = "out"
    window: int = 252
    step: int = 1
    min_coverage: float = 0.8
    em_tol: float = 1e-8
    em_max_iter: int = 500
    factors: str = "CF,CF_plus,CF_minus"
    factor: str = "CF_minus"
    control: str = "vix"
    beta_window: int = 252
    min_obs: int = 200
    n_quantiles: int = 5
    n_test_assets: int = 10
    weighting: str = "value"
    schemes: str = "single,controlled"
    nw_lags: int = 12
    three_pass_p: str = "auto"
    monthly_innovations: str = "end"
    seed: int = 7
    on_row_error: str = "fail"

    def factor_list(self) -> list:
        names = [s.strip() for s in self.factors.split(",") if s.strip()]
        if self.factor not in names:
            names.append(self.factor)
        bad = [n for n in names if n not in FACTOR_TO_MEASURE]
        if bad:
            raise ValueError(f"unknown factor names {bad}")
        return names

    def scheme_list(self) -> list:
        out = [s.strip() for s in self.schemes.split(",") if s.strip()]
        for s in out:
            if s not in pf.SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        return out

    def validate(self) -> None:
        fa.WindowSpec(self.window, self.step, self.min_coverage)
        pf.SortSpec(self.n_quantiles, self.weighting)
        if self.control not in ex.CONTROLS:
            raise ValueError(f"control must be one of {ex.CONTROLS}")
        if self.nw_lags < 0 or self.min_obs < 1 or self.beta_window < self.min_obs:
            raise ValueError("need nw_lags >= 0 and 1 <= min_obs <= beta_window")
        if self.monthly_innovations not in ("end", "mean"):
            raise ValueError("monthly_innovations must be 'end' or 'mean'")
        if self.on_row_error not in ("fail", "skip"):
            raise ValueError("on_row_error must be 'fail' or 'skip'")
        self.factor_list()
        self.scheme_list()

    def input_path(self, key: str) -> str:
        """Input file path with relative names resolved against ``data_dir``."""
        return os.path.join(self.data_dir, getattr(self, key))

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_pairs(cls, pairs: dict) -> "RunConfig":
        kw = {}
        defaults = cls()
        for k, v in pairs.items():
            if not hasattr(defaults, k):
                raise ValueError(f"unknown config key {k!r}")
            d = getattr(defaults, k)
            kw[k] = type(d)(v) if not isinstance(v, type(d)) else v
        return cls(**kw)


# --------------------------------------------------------------------------
# stages

def spot_series(*price_frames) -> pd.Series:
    df = pd.concat([f[["stock_id", "date", "price"]] for f in price_frames], ignore_index=True)
    df = df.drop_duplicates(["stock_id", "date"], keep="last")
    return df.set_index(["stock_id", "date"])["price"].sort_index()


def stage_iv(options: pd.DataFrame, spots: pd.Series, rates: pd.Series | None = None,
             constant_rate: float | None = None):
    """Filtered variance frame and rejected chains."""
    q, chains = md.chain_table(options, spots, rates, constant_rate=constant_rate)
    kept, acc, rej = md.filter_quotes(q, chains)
    frame = iv.compute_variance_frame(kept, acc)
    return frame, rej


def stage_factors(panel: iv.VariancePanel, index_panel: iv.VariancePanel | None,
                  cfg: RunConfig) -> dict:
    """Rolling CF family from the firm panel and MF family from the index."""
    spec = fa.WindowSpec(cfg.window, cfg.step, cfg.min_coverage)
    out = {}
    for name in cfg.factor_list():
        w = panel.wide(FACTOR_TO_MEASURE[name])
        out[name] = fa.rolling_factor(w, spec, name, tol=cfg.em_tol, max_iter=cfg.em_max_iter)
    if index_panel is not None and len(index_panel):
        for measure, name in fa.MEASURE_TO_MF.items():
            w = index_panel.wide(measure)
            if w.shape[1]:
                out[name] = fa.FactorSeries(name, w.iloc[:, 0])
    return out


def stage_betas(stocks: pd.DataFrame, factors: dict, cfg: RunConfig) -> pd.DataFrame:
    fs = factors[cfg.factor]
    mf_name = "MF" + cfg.factor[2:]
    control = ex.control_series(
        cfg.control, stocks=stocks,
        index_variance=factors["MF"].levels if "MF" in factors else None,
        market_fear=factors[mf_name].innovations if mf_name in factors else None,
    )
    returns = stocks.pivot(index="date", columns="stock_id", values="excess_return").sort_index()
    return ex.estimate_betas(returns, fs.innovations, control, cfg.beta_window, cfg.min_obs,
                             factor_name=cfg.factor, control_name=cfg.control)


def stage_sort(betas: pd.DataFrame, stocks: pd.DataFrame, cfg: RunConfig,
               panels: dict | None = None) -> dict:
    """Portfolio panels per scheme plus the test-asset sort (``n_test_assets`` buckets)."""
    panels = panels or pf.monthly_panels(stocks)
    elig = pf.eligibility_panel(panels)
    out = {}
    for scheme in cfg.scheme_list():
        control = None if scheme == "single" else "beta_control"
        spec = pf.SortSpec(cfg.n_quantiles, cfg.weighting, control, scheme)
        out[scheme] = pf.sort_portfolios(betas, panels["ret"], panels["cap"], spec,
                                         eligible=elig)
    spec = pf.SortSpec(cfg.n_test_assets, cfg.weighting)
    deciles = pf.sort_portfolios(betas, panels["ret"], panels["cap"], spec, eligible=elig)
    deciles.scheme = f"test_assets_{cfg.n_test_assets}"
    out["test_assets"] = deciles
    return out


def _month_end_index(index) -> pd.DatetimeIndex:
    """Calendar month-end dates for any dated index."""
    per = pd.DatetimeIndex(index).to_period("M")
    return per.to_timestamp(how="end").normalize()


def pricing_inputs(sorts: dict, stocks: pd.DataFrame, factors: dict, ff: pd.DataFrame,
                   cfg: RunConfig, panels: dict | None = None) -> dict:
    """Monthly test assets and pricing factors keyed by calendar month-end.

    The fear factor enters through its mimicking portfolio built from the
    daily returns of the single-sort buckets.
    """
    panels = panels or pf.monthly_panels(stocks)
    base_panel = sorts.get("single")
    if base_panel is None:
        raise ValueError("the single sort is required for the mimicking portfolio")
    base = pf.daily_bucket_returns(base_panel, stocks, panels["cap"], cfg.weighting)
    mimic = cs.mimicking_portfolio(factors[cfg.factor].innovations, base, cfg.factor)

    test = sorts["test_assets"].returns
    assets = test[[c for c in test.columns if c.isdigit()]].copy()
    assets.index = _month_end_index(assets.index)
    f_cf = mimic.monthly_returns.rename(cfg.factor)
    f_cf.index = _month_end_index(f_cf.index)
    ffm = ff.set_index(_month_end_index(ff["date"]))[pf.FF5]
    ffm = ffm.rename(columns=lambda c: "MKT" if c == "mkt_rf" else c.upper())
    pricing = pd.concat([f_cf, ffm], axis=1).sort_index()
    assets.index.name = pricing.index.name = "date"
    return {"assets": assets, "factors": pricing, "mimicking": mimic}


FMB_SPECS = {"FMB_MKT": ["MKT"], "FMB_FF5": ["MKT", "SMB", "HML", "RMW", "CMA"]}


def stage_fmb(assets: pd.DataFrame, pricing: pd.DataFrame, cfg: RunConfig,
              specs: dict | None = None) -> dict:
    """Fama-MacBeth premia for the fear factor next to each set of controls.

    ``specs`` maps a spec id to control columns; ``None`` runs
    :data:`FMB_SPECS` on the columns available.
    """
    if specs is None:
        specs = {k: v for k, v in FMB_SPECS.items() if set(v) <= set(pricing.columns)}
    results, rows = {}, []
    for spec_id, extra in specs.items():
        cols = [cfg.factor] + [c for c in extra if c != cfg.factor]
        try:
            est = cs.FamaMacBeth(cfg.nw_lags).fit(assets, pricing[cols])
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("%s skipped: %s", spec_id, exc)
            continue
        rpe = est.estimate(cfg.factor)
        results[spec_id] = rpe
        rows.append(cs.premia_rows(spec_id, rpe))
    results["premia"] = pd.concat(rows, ignore_index=True) if rows else \
        pd.DataFrame(columns=cs.PREMIA_COLUMNS)
    return results


def stage_threepass(assets: pd.DataFrame, pricing: pd.DataFrame, cfg: RunConfig) -> dict:
    """Three-pass premia of the fear factor with the market as second observable."""
    p = cfg.three_pass_p if cfg.three_pass_p == "auto" else int(cfg.three_pass_p)
    market = pricing["MKT"] if "MKT" in pricing.columns else None
    results = {}
    try:
        tp = cs.three_pass(assets, pricing[cfg.factor], market, p=p, nw_lags=cfg.nw_lags)
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("three-pass skipped: %s", exc)
        results["premia"] = pd.DataFrame(columns=cs.PREMIA_COLUMNS)
        return results
    results["THREEPASS"] = tp
    results["premia"] = cs.premia_rows("THREEPASS", tp)
    return results


def stage_premia(sorts: dict, stocks: pd.DataFrame, factors: dict, ff: pd.DataFrame,
                 cfg: RunConfig, panels: dict | None = None) -> dict:
    """Mimicking portfolio, Fama-MacBeth and three-pass estimates."""
    inputs = pricing_inputs(sorts, stocks, factors, ff, cfg, panels)
    fmb = stage_fmb(inputs["assets"], inputs["factors"], cfg)
    tp = stage_threepass(inputs["assets"], inputs["factors"], cfg)
    out = {"mimicking": inputs["mimicking"], "test_assets": inputs["assets"],
           "pricing_factors": inputs["factors"]}
    out.update({k: v for k, v in fmb.items() if k != "premia"})
    out.update({k: v for k, v in tp.items() if k != "premia"})
    out["premia"] = pd.concat([fmb["premia"], tp["premia"]], ignore_index=True)
    return out


def run_in_memory(market, cfg: RunConfig | None = None, *, premia: bool = True) -> dict:
    """Full pipeline on a :class:`fearfactor.synth.SyntheticMarket`."""
    cfg = cfg or RunConfig()
    cfg.validate()
    spots = spot_series(market.stocks, market.index_prices)
    frame, rej = stage_iv(market.options, spots, market.rates)
    iframe, irej = stage_iv(market.index_options, spots, market.rates)
    panel = iv.panel_from_frame(frame)
    ipanel = iv.panel_from_frame(iframe)
    factors = stage_factors(panel, ipanel, cfg)
    betas = stage_betas(market.stocks, factors, cfg)
    panels = pf.monthly_panels(market.stocks)
    sorts = stage_sort(betas, market.stocks, cfg, panels)
    out = {"panel": panel, "index_panel": ipanel, "rejected": rej, "factors": factors,
           "betas": betas, "sorts": sorts, "monthly": panels}
    if premia:
        out.update(stage_premia(sorts, market.stocks, factors, market.ff_factors, cfg, panels))
    return out
