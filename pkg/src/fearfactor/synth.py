"""Synthetic markets with known ground truth.

Random streams
--------------
Every random draw comes from NumPy's Philox4x64-10 counter-based bit
generator. A stream is identified by ``(seed, name, index)`` and keyed as
``SeedSequence([seed, crc32(name), index])``, so each firm, stock or
replication owns an independent stream and generation order never changes
the numbers drawn.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from scipy.special import ndtr

from .market_data import ChainMeta, OptionChain

TRADING_DAYS = 252
DAYS_PER_MONTH = 21


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for ``(seed, name, index)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()),
                                 int(index)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Black-Scholes

def bs_prices(spot, strike, rate, vol, T):
    """European call and put prices (no dividends), broadcasting over inputs."""
    spot, strike, vol = np.asarray(spot, float), np.asarray(strike, float), np.asarray(vol, float)
    sd = vol * np.sqrt(T)
    disc = np.exp(-rate * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / strike) + (rate + 0.5 * vol**2) * T) / sd
    d2 = d1 - sd
    call = spot * ndtr(d1) - strike * disc * ndtr(d2)
    put = strike * disc * ndtr(-d2) - spot * ndtr(-d1)
    return call, put


def bs_delta(spot, strike, rate, vol, T, is_call):
    sd = np.asarray(vol, float) * np.sqrt(T)
    d1 = (np.log(np.asarray(spot, float) / strike) + (rate + 0.5 * np.asarray(vol) ** 2) * T) / sd
    return np.where(is_call, ndtr(d1), ndtr(d1) - 1.0)


def quote_spread(mid, half_spread=0.01, tick=0.01):
    """Bid and ask around ``mid``.

    The half-spread is ``half_spread * mid`` floored at one tick, capped at
    half the mid so the bid stays positive.
    """
    hs = np.minimum(np.maximum(half_spread * mid, tick), 0.5 * mid)
    return mid - hs, mid + hs


def bs_chain(spot, rate, vol, days_to_expiry, strike_lo, strike_hi, step, *,
             half_spread=0.01, tick=0.01, underlying_id="SYN",
             quote_date=dt.date(2020, 1, 2)) -> OptionChain:
    """A full Black-Scholes chain with a call and a put at every grid strike.

    Volume and open interest carry sentinel positive values; implied vol is
    the flat ``vol`` and delta the model delta, so no quote is dropped for
    missing fields.
    """
    if vol <= 0 or step <= 0:
        raise ValueError("vol and step must be positive")
    n = int(math.floor((strike_hi - strike_lo) / step + 1e-9)) + 1
    if n < 4:
        raise ValueError(f"strike grid has {n} strikes, need at least 4")
    strikes = strike_lo + step * np.arange(n)
    T = days_to_expiry / 365.0
    call, put = bs_prices(spot, strikes, rate, vol, T)
    k = np.concatenate([strikes, strikes])
    is_call = np.concatenate([np.ones(n, bool), np.zeros(n, bool)])
    mid = np.concatenate([call, put])
    bid, ask = quote_spread(mid, half_spread, tick)
    meta = ChainMeta(underlying_id, quote_date,
                     quote_date + dt.timedelta(days=int(days_to_expiry)),
                     float(spot), float(rate))
    return OptionChain.from_arrays(
        meta, k, is_call, bid, ask, volume=np.full(2 * n, 100.0),
        open_interest=np.full(2 * n, 500.0), implied_vol=np.full(2 * n, float(vol)),
        delta=bs_delta(spot, k, rate, vol, T, is_call),
    )


# --------------------------------------------------------------------------
# specs

@dataclass
class SyntheticSpec:
    """Knobs for every generator in this module.

    Premia and volatilities of factor returns are in percent per month.
    """

    seed: int = 7
    # panel-only generators
    n_firms: int = 12
    n_days: int = 2520
    ar_rho: float = 0.98
    panel_noise: float = 0.1
    missing_rate: float = 0.0
    n_factors: int = 1
    factor_shares: tuple = (0.7, 0.3)
    # option market
    start: str = "2010-01-04"
    rate: float = 0.02
    fear_mean: float = 0.08
    fear_daily_vol: float = 0.004
    firm_level_lo: float = 0.04
    firm_level_hi: float = 0.12
    firm_loading_lo: float = 0.6
    firm_loading_hi: float = 1.4
    firm_noise_vol: float = 0.001
    index_loading: float = 0.5
    index_own_vol: float = 0.002
    n_strikes: int = 16
    strike_grid: str = "forward"
    strike_width: float = 4.0
    half_spread: float = 0.01
    chain_missing_rate: float = 0.02
    extra_expiry: bool = False
    # stock market
    n_stocks: int = 300
    true_premium: float = -0.40
    fear_factor_vol: float = 0.5
    market_premium: float = 0.5
    market_vol: float = 4.0
    beta_fear_sd: float = 1.0
    idio_vol: float = 0.005
    other_factor_vol: float = 2.5

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown synthetic spec key {key!r}")
            kw[key] = _coerce(value, getattr(defaults, key))
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_text(Path(path).read_text())


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(x) for x in value.split(","))
    return value


# --------------------------------------------------------------------------
# factor panels

def _ar1(rng, n, rho, sd=1.0):
    """Stationary AR(1) path with unit (or ``sd``) marginal standard deviation."""
    e = rng.standard_normal(n)
    e[1:] *= math.sqrt(1.0 - rho * rho)
    return sd * lfilter([1.0], [1.0, -rho], e)


def factor_panel(spec: SyntheticSpec) -> dict:
    """Panel ``x[t, i] = loading_i * f_t + noise`` with AR(1) factors.

    With ``n_factors == 2`` the two factors are exactly orthogonal and unit
    variance in sample and the loadings are orthogonal across firms, scaled
    so the population variance shares are ``factor_shares``.

    Returns
    -------
    dict with ``panel`` (DataFrame dates x firms, NaN where masked),
    ``true_factor`` (DataFrame, one column per factor), ``loadings``.
    """
    n, T = spec.n_firms, spec.n_days
    if n < 2:
        raise ValueError("need at least two firms")
    dates = pd.bdate_range(spec.start, periods=T)
    firms = [f"F{i:04d}" for i in range(n)]
    if spec.n_factors == 1:
        f = _ar1(stream(spec.seed, "panel/factor"), T, spec.ar_rho)
        lam = stream(spec.seed, "panel/loadings").uniform(0.5, 1.5, n)
        F = f[:, None]
        L = lam[:, None]
    elif spec.n_factors == 2:
        raw = np.column_stack([_ar1(stream(spec.seed, "panel/factor", j), T, spec.ar_rho)
                               for j in range(2)])
        raw -= raw.mean(axis=0)
        q, _ = np.linalg.qr(raw)
        F = q * math.sqrt(T)  # orthonormal in sample, unit variance
        s1, s2 = spec.factor_shares
        signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        if n % 2:
            signs[-1] = 0.0
        L = np.column_stack([np.full(n, math.sqrt(s1)),
                             math.sqrt(s2 * n / max(np.count_nonzero(signs), 1)) * signs])
    else:
        raise ValueError("n_factors must be 1 or 2")
    common = F @ L.T
    noise_sd = spec.panel_noise * F[:, 0].std()
    eps = np.column_stack([stream(spec.seed, "panel/noise", i).standard_normal(T)
                           for i in range(n)])
    x = common + noise_sd * eps
    if spec.missing_rate > 0:
        mask = np.column_stack([stream(spec.seed, "panel/mask", i).random(T)
                                for i in range(n)]) < spec.missing_rate
        x = np.where(mask, np.nan, x)
    panel = pd.DataFrame(x, index=dates, columns=firms)
    names = [f"f{j + 1}" for j in range(F.shape[1])]
    return {
        "panel": panel,
        "true_factor": pd.DataFrame(F, index=dates, columns=names),
        "loadings": pd.DataFrame(L, index=firms, columns=names),
    }


# --------------------------------------------------------------------------
# stock returns

def priced_cross_section(spec: SyntheticSpec, shocks: np.ndarray | None = None) -> dict:
    """Daily stock returns with a priced fear factor and a market factor.

    ``r = b_fear * (prem_f + vol_f * u) + b_mkt * m + e``, where ``u`` are
    standard normal fear shocks (pass ``shocks`` to share them with an
    option market) and ``m`` the daily market excess return.

    Returns
    -------
    dict with ``stocks`` (long frame in the stocks.csv layout with
    ``excess_return``), ``betas`` (true loadings), ``lambdas`` (true premia,
    percent per month), ``market`` (daily market excess return),
    ``fear_factor`` (daily factor return including its premium).
    """
    T = spec.n_days
    dates = pd.bdate_range(spec.start, periods=T)
    if shocks is None:
        shocks = stream(spec.seed, "fear/shocks").standard_normal(T)
    prem_d = spec.true_premium / 100.0 / DAYS_PER_MONTH
    vol_d = spec.fear_factor_vol / 100.0 / math.sqrt(DAYS_PER_MONTH)
    fear_ret = prem_d + vol_d * shocks
    mrng = stream(spec.seed, "market")
    mkt = spec.market_premium / 100.0 / DAYS_PER_MONTH + \
        spec.market_vol / 100.0 / math.sqrt(DAYS_PER_MONTH) * mrng.standard_normal(T)
    rf_d = spec.rate / TRADING_DAYS

    n = spec.n_stocks
    ids = [f"S{i:04d}" for i in range(n)]
    b_fear = np.empty(n)
    b_mkt = np.empty(n)
    rets = np.empty((T, n))
    prices = np.empty((T, n))
    caps = np.empty((T, n))
    vols = np.empty((T, n))
    for i in range(n):
        g = stream(spec.seed, "stock", i)
        b_fear[i] = spec.beta_fear_sd * g.standard_normal()
        b_mkt[i] = g.uniform(0.6, 1.4)
        p0 = math.exp(g.normal(math.log(30.0), 0.8))
        shares = math.exp(g.normal(math.log(5e7), 1.0))
        e = spec.idio_vol * g.standard_normal(T)
        r = b_fear[i] * fear_ret + b_mkt[i] * mkt + e
        rets[:, i] = r
        prices[:, i] = p0 * np.cumprod(1.0 + r + rf_d)
        caps[:, i] = prices[:, i] * shares
        vols[:, i] = np.exp(g.normal(math.log(2e5), 0.5, T))

    stocks = pd.DataFrame({
        "stock_id": np.tile(ids, T),
        "date": np.repeat(dates.to_numpy(), n),
        "excess_return": rets.ravel(),
        "price": prices.ravel(),
        "market_cap": caps.ravel(),
        "volume": vols.ravel(),
    })
    return {
        "stocks": stocks,
        "betas": pd.DataFrame({"fear": b_fear, "market": b_mkt}, index=ids),
        "lambdas": pd.Series({"fear": spec.true_premium, "market": spec.market_premium}),
        "market": pd.Series(mkt, index=dates, name="mkt_rf"),
        "fear_factor": pd.Series(fear_ret, index=dates, name="fear"),
    }


# --------------------------------------------------------------------------
# full market

@dataclass
class SyntheticMarket:
    spec: SyntheticSpec
    options: pd.DataFrame
    index_options: pd.DataFrame
    stocks: pd.DataFrame
    index_prices: pd.DataFrame
    rates: pd.Series
    ff_factors: pd.DataFrame
    truth: dict = field(default_factory=dict)


def _chain_quotes(spec, uid, dates, spots, vols, dte, n_strikes, rng_missing):
    """Quote frame for one underlying: one chain per day (plus optional long expiry)."""
    T_days = len(dates)
    present = rng_missing.random(T_days) >= spec.chain_missing_rate
    expiries = [dte]
    if spec.extra_expiry:
        expiries.append(dte + 28)
    frames = []
    j = np.arange(n_strikes) - n_strikes // 2
    for d in expiries:
        T = np.asarray(d, float) / 365.0
        fwd = spots * np.exp(spec.rate * T)
        width = 2 * spec.strike_width * vols * np.sqrt(T) / n_strikes
        if spec.strike_grid == "forward":
            # log-spaced around the forward, K0 half a step below it every day
            K = fwd[:, None] * np.exp(width[:, None] * (j[None, :] + 0.5))
        elif spec.strike_grid == "round":
            raw_step = fwd * width
            mag = 10.0 ** np.floor(np.log10(raw_step))
            step = np.maximum(np.round(raw_step / mag * 2), 1) / 2 * mag
            centre = np.round(fwd / step) * step
            K = centre[:, None] + step[:, None] * j[None, :]
        else:
            raise ValueError("strike_grid must be 'forward' or 'round'")
        S = np.broadcast_to(spots[:, None], K.shape)
        V = np.broadcast_to(vols[:, None], K.shape)
        Tm = np.broadcast_to(T[:, None], K.shape)
        call, put = bs_prices(S, K, spec.rate, V, Tm)
        rows = np.nonzero((K > 0) & present[:, None])
        kk = K[rows]
        qd = dates[rows[0]]
        ed = qd + pd.to_timedelta(np.asarray(d)[rows[0]], unit="D")
        for is_call, px in ((True, call), (False, put)):
            bid, ask = quote_spread(px[rows], spec.half_spread)
            frames.append(pd.DataFrame({
                "underlying_id": uid, "quote_date": qd, "expiry_date": ed,
                "strike": kk, "is_call": is_call, "bid": bid, "ask": ask,
                "volume": 100.0, "open_interest": 500.0, "implied_vol": V[rows],
                "delta": bs_delta(S[rows], kk, spec.rate, V[rows], Tm[rows], is_call),
            }))
    out = pd.concat(frames, ignore_index=True)
    return out


def synthetic_market(spec: SyntheticSpec) -> SyntheticMarket:
    """Option chains, stocks, rates and factor files from one latent fear process.

    A common variance level ``X_t`` (AR(1) around ``fear_mean``) is driven by
    standard normal shocks ``u_t``. Firm ``i`` quotes flat-vol Black-Scholes
    chains at variance ``a_i + b_i (X_t - mean) + noise``; the index quotes at
    ``mean / 2 + index_loading (X_t - mean)`` plus its own AR(1)
    component with shock volatility ``index_own_vol``. Stock returns load on the priced
    fear factor built from the same ``u_t``, so the fear premium is
    ``true_premium`` percent per month per unit of stock loading.
    """
    T = spec.n_days
    dates = pd.bdate_range(spec.start, periods=T)
    u = stream(spec.seed, "fear/shocks").standard_normal(T)
    shocks = spec.fear_daily_vol * u
    shocks[0] = 0.0
    dev = lfilter([1.0], [1.0, -spec.ar_rho], shocks)
    X = spec.fear_mean + dev

    cs = priced_cross_section(spec, shocks=u)
    stocks = cs["stocks"]
    n_opt = min(spec.n_firms, spec.n_stocks)
    ids = cs["betas"].index[:n_opt]
    price_wide = stocks.pivot(index="date", columns="stock_id", values="price")
    dte = 23 + (np.arange(T) % 15)

    firm_frames = []
    levels = np.empty((T, n_opt))
    for i, uid in enumerate(ids):
        g = stream(spec.seed, "firm_var", i)
        a = g.uniform(spec.firm_level_lo, spec.firm_level_hi)
        b = g.uniform(spec.firm_loading_lo, spec.firm_loading_hi)
        noise = _ar1(g, T, 0.9, spec.firm_noise_vol / math.sqrt(1 - 0.81))
        var = np.maximum(a + b * dev + noise, 0.002)
        levels[:, i] = var
        firm_frames.append(_chain_quotes(
            spec, uid, dates, price_wide[uid].to_numpy(), np.sqrt(var), dte,
            spec.n_strikes, stream(spec.seed, "chain_missing", i)))
    options = pd.concat(firm_frames, ignore_index=True)

    # index: level path from the market factor, variance from the fear level
    mkt = cs["market"].to_numpy()
    rf_d = spec.rate / TRADING_DAYS
    idx_level = 1000.0 * np.cumprod(1.0 + mkt + rf_d)
    own = spec.index_own_vol * stream(spec.seed, "index_var").standard_normal(T)
    own[0] = 0.0
    idx_dev = spec.index_loading * dev + lfilter([1.0], [1.0, -spec.ar_rho], own)
    idx_var = np.maximum(spec.fear_mean * 0.5 + idx_dev, 0.002)
    index_options = _chain_quotes(
        spec, "INDEX", dates, idx_level, np.sqrt(idx_var), dte, 2 * spec.n_strikes,
        stream(spec.seed, "chain_missing", 10_000))
    index_prices = pd.DataFrame({
        "stock_id": "INDEX", "date": dates, "excess_return": mkt,
        "price": idx_level, "market_cap": np.nan, "volume": np.nan,
    })

    rates = pd.Series(spec.rate, index=dates, name="rate")

    # monthly factor file
    month = dates.to_period("M")
    mret = pd.Series(mkt, index=dates).groupby(month).apply(lambda s: np.prod(1 + s) - 1)
    frng = stream(spec.seed, "ff_other")
    nm = len(mret)
    other = spec.other_factor_vol / 100.0 * frng.standard_normal((nm, 5)) + 0.002
    month_end = pd.Series(dates, index=dates).groupby(month).max()
    ff = pd.DataFrame({
        "date": month_end.to_numpy(),
        "mkt_rf": mret.to_numpy(),
        "smb": other[:, 0], "hml": other[:, 1], "rmw": other[:, 2],
        "cma": other[:, 3], "mom": other[:, 4],
        "rf": math.exp(spec.rate / 12) - 1.0,
    })
    truth = {
        "fear_level": pd.Series(X, index=dates),
        "fear_shocks": pd.Series(u, index=dates),
        "firm_variance": pd.DataFrame(levels, index=dates, columns=list(ids)),
        "index_variance": pd.Series(idx_var, index=dates),
        **cs,
    }
    return SyntheticMarket(spec, options, index_options, stocks, index_prices,
                           rates, ff, truth)
