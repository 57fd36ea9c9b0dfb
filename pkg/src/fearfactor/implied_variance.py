"""Model-free implied variance and its call-side / put-side split."""
from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from .market_data import OptionChain, compute_forward

logger = logging.getLogger(__name__)

MEASURES = ("total", "good", "bad")
PANEL_COLUMNS = ["firm_id", "date", "total", "good", "bad", "n_calls", "n_puts",
                 "forward", "k0"]


@dataclass(frozen=True)
class VarianceObservation:
    firm_id: str
    date: dt.date
    total: float
    good: float
    bad: float
    n_calls: int
    n_puts: int
    forward: float
    k0: float
    degenerate: bool = False
    negative: bool = False


def _strike_weights(k: np.ndarray) -> np.ndarray:
    """Strike spacing: central differences inside, one-sided at both ends."""
    n = len(k)
    dk = np.zeros(n)
    if n == 1:
        return dk
    dk[1:-1] = 0.5 * (k[2:] - k[:-2])
    dk[0] = k[1] - k[0]
    dk[-1] = k[-1] - k[-2]
    return dk


def _otm_mids(chain: OptionChain, k0: float):
    """Out-of-the-money strike grid with one mid per strike.

    Duplicate (strike, right) quotes are averaged; quotes on the wrong side
    of ``k0`` are ignored. At ``k0`` the call and put mids are averaged.
    """
    mid = chain.mid
    strike = chain.strike
    calls = chain.is_call
    use = np.where(calls, strike >= k0, strike <= k0)
    k_all = strike[use]
    m_all = mid[use]
    c_all = calls[use]
    grid, inv = np.unique(k_all, return_inverse=True)
    q = np.bincount(inv, m_all, minlength=len(grid)) / np.bincount(inv, minlength=len(grid))
    n_calls = int(np.unique(k_all[c_all]).size)
    n_puts = int(np.unique(k_all[~c_all]).size)
    return grid, q, n_calls, n_puts


def _contributions(chain: OptionChain, k0: float):
    grid, q, n_calls, n_puts = _otm_mids(chain, k0)
    T = chain.maturity
    w = (2.0 / T) * _strike_weights(grid) / grid**2 * math.exp(chain.risk_free_rate * T)
    return grid, w * q, n_calls, n_puts


def variance_contributions(chain: OptionChain, k0: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-strike summands ``(2/T) * dK/K^2 * exp(rT) * Q(K)`` on the OTM grid."""
    grid, contrib, _, _ = _contributions(chain, k0)
    return grid, contrib


def compute_variance(chain: OptionChain, forward: float | None = None,
                     k0: float | None = None) -> VarianceObservation:
    """Total, good and bad implied variance of one filtered chain.

    The reference-strike summand and the forward correction are split evenly
    between the good (call) and bad (put) legs, so ``good + bad == total``
    up to rounding. A chain with strikes on only one side of ``k0`` is still
    computed and returned with ``degenerate=True``; a negative total is kept
    with ``negative=True``.
    """
    if forward is None or k0 is None:
        if chain.forward is not None and chain.k0 is not None:
            forward, k0 = chain.forward, chain.k0
        else:
            forward, k0 = compute_forward(chain)
    T = chain.maturity
    if T <= 0:
        raise ValueError("chain has non-positive time to expiry")

    grid, contrib, n_calls, n_puts = _contributions(chain, k0)
    above = grid > k0
    below = grid < k0
    at = ~above & ~below
    correction = (forward / k0 - 1.0) ** 2 / T

    total = float(contrib.sum() - correction)
    half_at = 0.5 * float(contrib[at].sum())
    good = float(contrib[above].sum()) + half_at - 0.5 * correction
    bad = float(contrib[below].sum()) + half_at - 0.5 * correction
    degenerate = not (above.any() and below.any())
    if degenerate:
        logger.debug("%s %s: strikes on one side of K0 only",
                     chain.underlying_id, chain.quote_date)
    return VarianceObservation(
        chain.underlying_id, chain.quote_date, total, good, bad, n_calls, n_puts,
        float(forward), float(k0), degenerate=degenerate, negative=total < 0,
    )


@dataclass
class VariancePanel:
    """Unbalanced (firm, date) panel of implied variances.

    ``frame`` is a long table sorted by (date, firm_id) with the
    :data:`PANEL_COLUMNS` plus ``degenerate``/``negative`` flags.
    """

    frame: pd.DataFrame
    warnings: list = field(default_factory=list)

    @property
    def firms(self) -> list:
        return sorted(self.frame["firm_id"].unique())

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(sorted(self.frame["date"].unique()))

    def __len__(self):
        return len(self.frame)

    def wide(self, measure: str = "total", drop_negative: bool = True) -> pd.DataFrame:
        """Dates x firms matrix of one measure, NaN where unobserved.

        With ``drop_negative`` the cells whose total is negative are blanked,
        since a variance price cannot be negative.
        """
        if measure not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}")
        f = self.frame
        if drop_negative and "negative" in f:
            f = f[~f["negative"].astype(bool)]
        out = f.pivot(index="date", columns="firm_id", values=measure)
        out = out.reindex(index=self.dates, columns=self.firms)
        out.index.name = "date"
        return out


def build_panel(observations: Iterable[VarianceObservation]) -> VariancePanel:
    """Assemble observations into a panel; a later duplicate cell wins."""
    rows = {}
    warnings = []
    for obs in observations:
        key = (obs.firm_id, pd.Timestamp(obs.date))
        if key in rows:
            warnings.append(f"duplicate cell {obs.firm_id} {obs.date}: later value kept")
        rows[key] = obs
    if warnings:
        logger.warning("%d duplicate panel cells replaced", len(warnings))
    records = [
        (o.firm_id, pd.Timestamp(o.date), o.total, o.good, o.bad, o.n_calls,
         o.n_puts, o.forward, o.k0, o.degenerate, o.negative)
        for o in rows.values()
    ]
    frame = pd.DataFrame(records, columns=PANEL_COLUMNS + ["degenerate", "negative"])
    frame = frame.sort_values(["date", "firm_id"], kind="stable").reset_index(drop=True)
    return VariancePanel(frame, warnings)


def panel_from_frame(frame: pd.DataFrame) -> VariancePanel:
    frame = frame.copy()
    frame["date"] = pd.to_datetime(frame["date"])
    frame["firm_id"] = frame["firm_id"].astype(str)
    if "negative" not in frame:
        frame["negative"] = frame["total"] < 0
    if "degenerate" not in frame:
        frame["degenerate"] = False
    frame = frame.sort_values(["date", "firm_id"], kind="stable").reset_index(drop=True)
    return VariancePanel(frame)


def _mean_offdiag(cov: pd.DataFrame) -> float:
    c = cov.to_numpy()
    iu = np.triu_indices(c.shape[0], k=1)
    vals = c[iu]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if len(vals) else float("nan")


def panel_summary(panel: VariancePanel, drop_negative: bool = False) -> pd.DataFrame:
    """Descriptive statistics per measure.

    Rows: ``Mean`` and ``Std`` (time-series averages of the daily
    cross-sectional mean and standard deviation) and ``Ave. Pairwise
    covariance`` (mean over firm pairs of the pairwise-complete covariance;
    NaN with fewer than two firms). Columns: total, good, bad.
    """
    if len(panel) == 0:
        raise ValueError("panel is empty")
    out = {}
    for m in MEASURES:
        w = panel.wide(m, drop_negative=drop_negative)
        mean = w.mean(axis=1).mean()
        std = w.std(axis=1, ddof=1).mean()
        cov = _mean_offdiag(w.cov()) if w.shape[1] >= 2 else float("nan")
        out[m] = [mean, std, cov]
    return pd.DataFrame(out, index=["Mean", "Std", "Ave. Pairwise covariance"])


def write_panel_csv(panel: VariancePanel, path) -> None:
    f = panel.frame[PANEL_COLUMNS].copy()
    f["date"] = f["date"].dt.strftime("%Y-%m-%d")
    f.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def read_panel_csv(path) -> VariancePanel:
    f = pd.read_csv(path, dtype={"firm_id": str})
    missing = set(PANEL_COLUMNS) - set(f.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return panel_from_frame(f)


def compute_variance_frame(quotes: pd.DataFrame, chains: pd.DataFrame) -> pd.DataFrame:
    """Batch version of :func:`compute_variance`.

    Parameters
    ----------
    quotes : filtered quotes from :func:`fearfactor.market_data.filter_quotes`,
        sorted by (chain, strike)
    chains : accepted chain rows with ``forward`` and ``k0``

    Returns
    -------
    DataFrame with :data:`PANEL_COLUMNS` plus ``degenerate`` and ``negative``.
    """
    cols = PANEL_COLUMNS + ["degenerate", "negative"]
    if len(chains) == 0:
        return pd.DataFrame(columns=cols)
    pos = pd.Series(np.arange(len(chains)), index=chains["chain"].to_numpy())
    c = pos.reindex(quotes["chain"].to_numpy()).to_numpy()
    if np.isnan(c.astype(float)).any():
        raise ValueError("quotes reference chains missing from the chain table")
    c = c.astype(int)
    k0 = chains["k0"].to_numpy(dtype=float)
    fwd = chains["forward"].to_numpy(dtype=float)
    T = chains["days"].to_numpy(dtype=float) / 365.0
    r = chains["rate"].to_numpy(dtype=float)

    strike = quotes["strike"].to_numpy(dtype=float)
    is_call = quotes["is_call"].to_numpy(dtype=bool)
    mid = 0.5 * (quotes["bid"].to_numpy(dtype=float) + quotes["ask"].to_numpy(dtype=float))
    use = np.where(is_call, strike >= k0[c], strike <= k0[c])
    c, strike, is_call, mid = c[use], strike[use], is_call[use], mid[use]

    # one grid point per (chain, strike), averaging the mids found there
    order = np.lexsort((strike, c))
    c, strike, is_call, mid = c[order], strike[order], is_call[order], mid[order]
    new = np.ones(len(c), dtype=bool)
    new[1:] = (c[1:] != c[:-1]) | (strike[1:] != strike[:-1])
    gid = np.cumsum(new) - 1
    gc = c[new]
    gk = strike[new]
    q = np.bincount(gid, mid) / np.bincount(gid)

    # counts of distinct strikes per right
    def distinct(mask):
        m = np.zeros(len(gk), dtype=bool)
        m[gid[mask]] = True
        return np.bincount(gc[m], minlength=len(chains))

    n_calls = distinct(is_call)
    n_puts = distinct(~is_call)

    first = np.ones(len(gc), dtype=bool)
    first[1:] = gc[1:] != gc[:-1]
    last = np.ones(len(gc), dtype=bool)
    last[:-1] = gc[1:] != gc[:-1]
    prev_k = np.empty_like(gk)
    prev_k[1:] = gk[:-1]
    next_k = np.empty_like(gk)
    next_k[:-1] = gk[1:]
    dk = np.where(first & last, 0.0,
                  np.where(first, next_k - gk,
                           np.where(last, gk - prev_k, 0.5 * (next_k - prev_k))))

    growth = np.exp(r * T)
    contrib = (2.0 / T[gc]) * dk / gk**2 * growth[gc] * q
    above = gk > k0[gc]
    below = gk < k0[gc]
    at = ~above & ~below
    n = len(chains)
    s_all = np.bincount(gc, contrib, minlength=n)
    s_up = np.bincount(gc[above], contrib[above], minlength=n)
    s_dn = np.bincount(gc[below], contrib[below], minlength=n)
    s_at = np.bincount(gc[at], contrib[at], minlength=n)
    has_up = np.bincount(gc[above], minlength=n) > 0
    has_dn = np.bincount(gc[below], minlength=n) > 0
    corr = (fwd / k0 - 1.0) ** 2 / T
    total = s_all - corr
    good = s_up + 0.5 * s_at - 0.5 * corr
    bad = s_dn + 0.5 * s_at - 0.5 * corr
    return pd.DataFrame({
        "firm_id": chains["underlying_id"].to_numpy(),
        "date": pd.to_datetime(chains["quote_date"]).to_numpy(),
        "total": total, "good": good, "bad": bad,
        "n_calls": n_calls, "n_puts": n_puts, "forward": fwd, "k0": k0,
        "degenerate": ~(has_up & has_dn), "negative": total < 0,
    })[cols]
