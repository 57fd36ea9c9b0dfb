"""Summary tables in fixed layouts with fixed float formats.

Each builder returns a DataFrame whose index and columns follow the
published layout; :func:`render` turns it into plain fixed-width text.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from . import factors as fa
from . import implied_variance as iv
from . import portfolio as pf

DISPLAY_NAMES = {"CF": "CF", "CF_plus": "CF+", "CF_minus": "CF-",
                 "MF": "MF", "MF_plus": "MF+", "MF_minus": "MF-"}
TABLE1_ROWS = ["Mean", "Std", "Ave. Pairwise covariance"]
TABLE2_ROWS = ["Mean (%)", "Median (%)", "Min (%)", "Max (%)", "Std (%)", "% variation"]
TABLE3_ROWS = ["mean (%)", "t-stat", "alpha FF5 (%)", "t-stat FF5",
               "alpha FF5+MOM (%)", "t-stat FF5+MOM"]
PREMIA_FOOTER = ["Adj. R2", "Wald (p-value)", "No. Factors"]


def table1(panel: iv.VariancePanel) -> pd.DataFrame:
    """Mean, Std and average pairwise covariance of total, good and bad variance."""
    s = iv.panel_summary(panel)
    s.columns = ["Total", "Good", "Bad"]
    return s.loc[TABLE1_ROWS]


def table2(factor_series: dict, full_sample: dict | None = None) -> pd.DataFrame:
    """Rolling variance-explained statistics plus the full-sample share, in percent."""
    s = fa.variance_explained_summary(factor_series, full_sample)
    s.index = [f"{r} (%)" if r != "% variation" else r for r in s.index]
    s = s.reindex(TABLE2_ROWS)
    s.columns = [DISPLAY_NAMES.get(c, c) for c in s.columns]
    return s


def table3(panel: pf.PortfolioReturnPanel, ff: pd.DataFrame | None = None,
           nw_lags: int = 12) -> pd.DataFrame:
    """Bucket and spread returns with t-stats and factor-model alphas."""
    s = pf.spread_summary(panel, ff, nw_lags)
    s.index = [{"mean": "mean (%)", "t": "t-stat", "alpha FF5": "alpha FF5 (%)",
                "t alpha FF5": "t-stat FF5", "alpha FF5+MOM": "alpha FF5+MOM (%)",
                "t alpha FF5+MOM": "t-stat FF5+MOM"}[r] for r in s.index]
    return s.reindex(TABLE3_ROWS)


def premia_table(premia: pd.DataFrame, n_factors: dict | None = None) -> pd.DataFrame:
    """Premia by specification: a lambda row and a t row per factor, then the footer.

    ``premia`` is in the premia.csv layout. ``n_factors`` maps a spec id to
    its number of latent factors; other specs leave that cell empty.
    """
    n_factors = n_factors or {}
    specs = list(dict.fromkeys(premia["spec_id"]))
    names = list(dict.fromkeys(premia["factor_name"]))
    names = [n for n in names if n != "const"] + (["const"] if "const" in names else [])
    rows = [r for n in names for r in (f"lambda {DISPLAY_NAMES.get(n, n)}",
                                       f"t({DISPLAY_NAMES.get(n, n)})")]
    out = pd.DataFrame(np.nan, index=rows + PREMIA_FOOTER, columns=specs, dtype=float)
    for spec, g in premia.groupby("spec_id", sort=False):
        for name, lam, t in zip(g["factor_name"], g["lambda"], g["t_stat"]):
            label = DISPLAY_NAMES.get(name, name)
            out.loc[f"lambda {label}", spec] = lam
            out.loc[f"t({label})", spec] = t
        out.loc["Adj. R2", spec] = g["adj_r2"].iloc[0]
        out.loc["Wald (p-value)", spec] = g["wald_p"].iloc[0]
        out.loc["No. Factors", spec] = n_factors.get(spec, np.nan)
    return out


def render(table: pd.DataFrame, float_format: str = "%.2f", title: str | None = None) -> str:
    """Fixed-width text; missing cells are blank, integer rows print without decimals."""
    def cell(row, v):
        if not np.isfinite(v):
            return ""
        if row == "No. Factors":
            return str(int(round(v)))
        return float_format % v

    body = [[str(r)] + [cell(r, float(v)) for v in table.loc[r]] for r in table.index]
    head = [""] + [str(c) for c in table.columns]
    width0 = max(len(x[0]) for x in [head] + body)
    widths = [max(len(x[j]) for x in [head] + body) for j in range(1, len(head))]
    widths = [max(w, 8) for w in widths]

    def line(cells):
        return cells[0].ljust(width0) + "".join("  " + c.rjust(w)
                                                for c, w in zip(cells[1:], widths))

    lines = ([title] if title else []) + [line(head)] + [line(b) for b in body]
    return "\n".join(x.rstrip() for x in lines) + "\n"


TABLE_FORMATS = {"table1": "%.3f", "table2": "%.2f", "table3": "%.2f",
                 "table6": "%.2f", "table9": "%.2f"}


def write_table(table: pd.DataFrame, path, float_format: str, title: str | None = None) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(render(table, float_format, title))
