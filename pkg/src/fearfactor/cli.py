"""Command line interface: one subcommand per stage plus ``pipeline`` and ``synth``.

Every subcommand reads its inputs from files, stages its outputs in a
scratch directory and moves them into ``--out-dir`` only on success, then
writes a key=value manifest. Exit codes: 0 success, 2 validation failure,
1 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import pandas as pd

from . import __version__
from . import cross_section as cs
from . import exposures as ex
from . import factors as fa
from . import implied_variance as iv
from . import market_data as md
from . import pipeline as pl
from . import portfolio as pf
from . import synth
from . import tables
from ._utils import write_csv

logger = logging.getLogger("fearfactor")

STAGES = ["ingest", "iv", "factors", "betas", "sort", "fmb", "threepass"]


class ValidationError(ValueError):
    """Bad configuration or input files; maps to exit code 2."""


# --------------------------------------------------------------------------
# config and manifests

def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    pairs = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip().replace("-", "_")] = v.strip()
    return pairs


def build_config(args) -> pl.RunConfig:
    pairs = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(pl.RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            pairs[f.name] = v
    try:
        cfg = pl.RunConfig.from_pairs(pairs)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    return cfg


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Stage:
    """Output staging for one subcommand.

    Files are written under a scratch directory inside ``out_dir`` and moved
    into place by :meth:`commit`; :meth:`abort` discards them.
    """

    def __init__(self, command: str, out_dir, cfg_text: str = ""):
        self.command = command
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{command}-", dir=self.out_dir))
        self.cfg_text = cfg_text
        self.inputs: dict = {}
        self.outputs: list = []
        self.started = dt.datetime.now(dt.timezone.utc)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.tmp / name

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"{path}: no such file")
        self.inputs[str(path)] = file_hash(path)
        return path

    def commit(self) -> None:
        hashes = {}
        for name in self.outputs:
            src = self.tmp / name
            hashes[name] = file_hash(src)
            os.replace(src, self.out_dir / name)
        lines = [f"command={self.command}", f"version={__version__}",
                 f"started={self.started.isoformat(timespec='seconds')}",
                 f"finished={dt.datetime.now(dt.timezone.utc).isoformat(timespec='seconds')}"]
        lines += [f"config.{x}" for x in self.cfg_text.splitlines() if x]
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output.{k}={v}" for k, v in sorted(hashes.items())]
        (self.out_dir / f"manifest_{self.command}.txt").write_text("\n".join(lines) + "\n")
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _report_row_errors(name, errors, cfg) -> None:
    if not errors:
        return
    for e in errors[:20]:
        logger.error("%s:%d: %s: %s", name, e.line, e.column, e.reason)
    if len(errors) > 20:
        logger.error("%s: %d more row errors", name, len(errors) - 20)
    if cfg.on_row_error == "fail":
        raise ValidationError(f"{name}: {len(errors)} malformed rows")


def _load_options(stage, path, cfg):
    try:
        df, errors = md.load_option_csv(stage.read(path))
    except md.ParseError as exc:
        raise ValidationError(str(exc)) from exc
    _report_row_errors(path, errors, cfg)
    return df


def _load_stocks(stage, path, cfg):
    try:
        df, errors = md.load_stock_csv(stage.read(path))
    except md.ParseError as exc:
        raise ValidationError(str(exc)) from exc
    _report_row_errors(path, errors, cfg)
    return df


def _load_rates(stage, path, cfg):
    try:
        s, errors = md.load_rates_csv(stage.read(path))
    except md.ParseError as exc:
        raise ValidationError(str(exc)) from exc
    _report_row_errors(path, errors, cfg)
    return s


def _out(cfg, name) -> Path:
    return Path(cfg.out_dir) / name


def read_matrix_csv(path) -> pd.DataFrame:
    """Date x column matrix with a leading ``date`` column."""
    df = pd.read_csv(path, parse_dates=["date"]).set_index("date").sort_index()
    if df.shape[1] == 0:
        raise ValidationError(f"{path}: no data columns")
    return df.astype(float)


def write_matrix_csv(df: pd.DataFrame, path) -> None:
    out = df.copy()
    out.index = pd.DatetimeIndex(out.index).strftime("%Y-%m-%d")
    out.index.name = "date"
    write_csv(out.reset_index(), path)


# --------------------------------------------------------------------------
# stages

def run_ingest(cfg: pl.RunConfig) -> None:
    """Validate every input file and report row-level problems."""
    st = Stage("ingest", cfg.out_dir, cfg.to_text())
    try:
        report, rows = [], []
        loaders = [("options", md.load_option_csv), ("index_options", md.load_option_csv),
                   ("stocks", md.load_stock_csv), ("index_prices", md.load_stock_csv),
                   ("rates", md.load_rates_csv)]
        for key, loader in loaders:
            path = cfg.input_path(key)
            try:
                data, errors = loader(st.read(path))
            except md.ParseError as exc:
                raise ValidationError(str(exc)) from exc
            report.append({"file": key, "path": path, "rows": len(data), "errors": len(errors)})
            rows += [{"file": key, "line": e.line, "column": e.column, "reason": e.reason}
                     for e in errors]
        ff = pf.read_ff_factors(st.read(cfg.input_path("ff_factors")))
        report.append({"file": "ff_factors", "path": cfg.input_path("ff_factors"),
                       "rows": len(ff), "errors": 0})
        write_csv(pd.DataFrame(report), st.path("ingest_report.csv"))
        write_csv(pd.DataFrame(rows, columns=["file", "line", "column", "reason"]),
                  st.path("row_errors.csv"))
        if rows and cfg.on_row_error == "fail":
            for r in rows[:20]:
                logger.error("%s:%d: %s: %s", r["file"], r["line"], r["column"], r["reason"])
            raise ValidationError(f"{len(rows)} malformed rows across input files")
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_iv(cfg: pl.RunConfig) -> None:
    """Filtered chains to firm and index implied-variance panels."""
    st = Stage("iv", cfg.out_dir, cfg.to_text())
    try:
        options = _load_options(st, cfg.input_path("options"), cfg)
        index_options = _load_options(st, cfg.input_path("index_options"), cfg)
        stocks = _load_stocks(st, cfg.input_path("stocks"), cfg)
        index_prices = _load_stocks(st, cfg.input_path("index_prices"), cfg)
        rates = _load_rates(st, cfg.input_path("rates"), cfg)
        spots = pl.spot_series(stocks, index_prices)
        frame, rej = pl.stage_iv(options, spots, rates)
        iframe, irej = pl.stage_iv(index_options, spots, rates)
        if not len(frame):
            raise ValidationError(f"{cfg.options}: no chain survived the filters")
        iv.write_panel_csv(iv.panel_from_frame(frame), st.path("panel.csv"))
        iv.write_panel_csv(iv.panel_from_frame(iframe), st.path("index_panel.csv"))
        write_csv(pd.concat([rej, irej], ignore_index=True), st.path("rejected_chains.csv"))
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_factors(cfg: pl.RunConfig) -> None:
    """Rolling common factors, index factors, table1.txt and table2.txt."""
    st = Stage("factors", cfg.out_dir, cfg.to_text())
    try:
        panel = iv.read_panel_csv(st.read(_out(cfg, "panel.csv")))
        ipanel = iv.read_panel_csv(st.read(_out(cfg, "index_panel.csv")))
        factors = pl.stage_factors(panel, ipanel, cfg)
        fa.write_factors_csv(list(factors.values()), st.path("factors.csv"))
        tables.write_table(tables.table1(panel), st.path("table1.txt"),
                           tables.TABLE_FORMATS["table1"])
        cf = {n: factors[n] for n in cfg.factor_list()}
        full = {n: fa.full_sample_variance_explained(panel.wide(pl.FACTOR_TO_MEASURE[n]),
                                                     tol=cfg.em_tol, max_iter=cfg.em_max_iter)
                for n in cf}
        tables.write_table(tables.table2(cf, full), st.path("table2.txt"),
                           tables.TABLE_FORMATS["table2"])
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_betas(cfg: pl.RunConfig) -> None:
    st = Stage("betas", cfg.out_dir, cfg.to_text())
    try:
        factors = fa.read_factors_csv(st.read(_out(cfg, "factors.csv")))
        if cfg.factor not in factors:
            raise ValidationError(f"factors.csv has no {cfg.factor} series")
        stocks = _load_stocks(st, cfg.input_path("stocks"), cfg)
        betas = pl.stage_betas(stocks, factors, cfg)
        write_csv(betas[ex.BETA_COLUMNS], st.path("betas.csv"))
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_sort(cfg: pl.RunConfig) -> None:
    """Portfolio sorts, table3.txt, test assets and pricing factors."""
    st = Stage("sort", cfg.out_dir, cfg.to_text())
    try:
        betas = ex.read_betas_csv(st.read(_out(cfg, "betas.csv")))
        factors = fa.read_factors_csv(st.read(_out(cfg, "factors.csv")))
        stocks = _load_stocks(st, cfg.input_path("stocks"), cfg)
        ff = pf.read_ff_factors(st.read(cfg.input_path("ff_factors")))
        panels = pf.monthly_panels(stocks)
        sorts = pl.stage_sort(betas, stocks, cfg, panels)
        pf.write_portfolios_csv(list(sorts.values()), st.path("portfolios.csv"))
        pf.write_memberships_csv(list(sorts.values()), st.path("memberships.csv"))
        main = sorts["single"] if "single" in sorts else next(iter(sorts.values()))
        tables.write_table(tables.table3(main, ff, cfg.nw_lags), st.path("table3.txt"),
                           tables.TABLE_FORMATS["table3"])
        if "single" in sorts:
            inputs = pl.pricing_inputs(sorts, stocks, factors, ff, cfg, panels)
            write_matrix_csv(inputs["assets"], st.path("test_assets.csv"))
            write_matrix_csv(inputs["factors"], st.path("pricing_factors.csv"))
        st.commit()
    except BaseException:
        st.abort()
        raise


def _combined_premia(st: Stage, cfg) -> None:
    frames = []
    for name in ("premia_fmb.csv", "premia_threepass.csv"):
        staged = st.tmp / name
        path = staged if staged.exists() else _out(cfg, name)
        if path.exists():
            frames.append(pd.read_csv(path, dtype={"spec_id": str, "factor_name": str}))
    df = pd.concat(frames, ignore_index=True) if frames else \
        pd.DataFrame(columns=cs.PREMIA_COLUMNS)
    cs.write_premia_csv(df, st.path("premia.csv"))


def _pricing_files(st, cfg, assets, factors):
    a = st.read(assets or _out(cfg, "test_assets.csv"))
    f = st.read(factors or _out(cfg, "pricing_factors.csv"))
    return read_matrix_csv(a), read_matrix_csv(f)


def run_fmb(cfg: pl.RunConfig, assets=None, factors=None) -> None:
    """Fama-MacBeth premia; explicit ``--factors`` files are priced jointly."""
    st = Stage("fmb", cfg.out_dir, cfg.to_text())
    try:
        R, F = _pricing_files(st, cfg, assets, factors)
        specs = None
        if factors is not None:
            if cfg.factor not in F.columns:
                cfg = dataclasses.replace(cfg, factor=str(F.columns[0]))
            specs = {"FMB": [c for c in F.columns if c != cfg.factor]}
        res = pl.stage_fmb(R, F, cfg, specs)
        if not len(res["premia"]):
            raise RuntimeError("no Fama-MacBeth specification could be estimated")
        cs.write_premia_csv(res["premia"], st.path("premia_fmb.csv"))
        tables.write_table(tables.premia_table(res["premia"]), st.path("table6.txt"),
                           tables.TABLE_FORMATS["table6"])
        _combined_premia(st, cfg)
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_threepass(cfg: pl.RunConfig, assets=None, factors=None) -> None:
    st = Stage("threepass", cfg.out_dir, cfg.to_text())
    try:
        R, F = _pricing_files(st, cfg, assets, factors)
        if cfg.factor not in F.columns:
            cfg = dataclasses.replace(cfg, factor=str(F.columns[0]))
        res = pl.stage_threepass(R, F, cfg)
        if "THREEPASS" not in res:
            raise RuntimeError("three-pass estimation failed")
        cs.write_premia_csv(res["premia"], st.path("premia_threepass.csv"))
        n_f = {"THREEPASS": res["THREEPASS"].n_latent_factors}
        tables.write_table(tables.premia_table(res["premia"], n_f), st.path("table9.txt"),
                           tables.TABLE_FORMATS["table9"])
        _combined_premia(st, cfg)
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_synth(spec: synth.SyntheticSpec, out_dir) -> None:
    """Write a synthetic market in the input file schemas."""
    st = Stage("synth", out_dir, spec.to_text())
    try:
        m = synth.synthetic_market(spec)
        md.write_option_csv(m.options, st.path("options.csv"))
        md.write_option_csv(m.index_options, st.path("index_options.csv"))
        md.write_stock_csv(m.stocks, st.path("stocks.csv"))
        md.write_stock_csv(m.index_prices, st.path("index_prices.csv"))
        md.write_rates_csv(m.rates, st.path("rates.csv"))
        pf.write_ff_factors(m.ff_factors, st.path("ff_factors.csv"))
        spec.save(st.path("spec.txt"))
        st.commit()
    except BaseException:
        st.abort()
        raise


def run_pipeline(cfg: pl.RunConfig) -> None:
    """Every stage in order, each reading the previous stage's files."""
    run_ingest(cfg)
    run_iv(cfg)
    run_factors(cfg)
    run_betas(cfg)
    run_sort(cfg)
    run_fmb(cfg)
    run_threepass(cfg)


# --------------------------------------------------------------------------
# argument parsing

def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="key=value run config file")
    for f in dataclasses.fields(pl.RunConfig):
        if f.name in skip:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       metavar=f.name.upper(), help=f"default: {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fearfactor",
                                     description="Common fear factors from option chains.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "validate input files and report malformed rows",
        "iv": "implied-variance panels from option chains",
        "factors": "rolling EM-PCA common factors and variance tables",
        "betas": "rolling stock loadings on factor innovations",
        "sort": "beta-sorted portfolios, spread table and test assets",
        "fmb": "Fama-MacBeth risk premia",
        "threepass": "three-pass risk premia with weak-factor test",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        if name in ("fmb", "threepass"):
            # here --factors names the pricing-factor file, not the factor families
            _add_config_flags(p, skip=("factors",))
            p.add_argument("--assets", help="test-asset CSV (date x asset)")
            p.add_argument("--factors", dest="factors_file",
                           help="pricing-factor CSV (date x factor)")
        else:
            _add_config_flags(p)
    p = sub.add_parser("synth", help="write a synthetic market",
                       description="write a synthetic market in the input schemas")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--spec", help="key=value SyntheticSpec file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a SyntheticSpec field")
    p.add_argument("--out-dir", default=".")
    return parser


def _synth_spec(args) -> synth.SyntheticSpec:
    spec = synth.SyntheticSpec.load(args.spec) if args.spec else synth.SyntheticSpec()
    text = spec.to_text()
    extra = []
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        extra.append(item)
    try:
        return synth.SyntheticSpec.from_text(text + "\n".join(extra))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            run_synth(_synth_spec(args), args.out_dir)
            return 0
        cfg = build_config(args)
        if args.command == "pipeline":
            run_pipeline(cfg)
        elif args.command in ("fmb", "threepass"):
            fn = run_fmb if args.command == "fmb" else run_threepass
            fn(cfg, args.assets, args.factors_file)
        else:
            {"ingest": run_ingest, "iv": run_iv, "factors": run_factors,
             "betas": run_betas, "sort": run_sort}[args.command](cfg)
    except (ValidationError, FileNotFoundError, md.ParseError) as exc:
        print(f"fearfactor {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"fearfactor {args.command}: error: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
