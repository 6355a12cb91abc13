"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import backtest as bt
from . import lstm
from . import market_data as md
from . import theorem_lab as tl
from .config import RunConfig, load_config, parse_value
from .dataset import build_samples, make_target
from .errors import ConfigError, TrendcastError
from .features import build_feature_frame
from .strategy import trend_signal

logger = logging.getLogger("trendcast")

POSITION_NOTE = ("position_mode={mode}; anticipated_trend trades clamp(S~_t + forecast), "
                 "tanh_forecast trades tanh(gamma * forecast); the source leaves the rule open")
MIN_THEOREM_N = 1000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _out(cfg: RunConfig, *parts) -> Path:
    p = Path(cfg.output_dir).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _store(cfg: RunConfig, args) -> Path:
    return Path(getattr(args, "store", None) or Path(cfg.output_dir) / "clean")


def _load_store(cfg: RunConfig, args) -> list[md.OhlcvSeries]:
    store = _store(cfg, args)
    files = sorted(store.glob("*.csv")) if store.is_dir() else []
    if cfg.tickers:
        files = [f for f in files if f.stem in set(cfg.tickers)]
        missing = set(cfg.tickers) - {f.stem for f in files}
        if missing:
            raise UsageError(f"tickers not in store {store}: {', '.join(sorted(missing))}")
    if not files:
        raise UsageError(f"no cleaned series under {store}; run 'trendcast ingest' first")
    return [md.load_ohlcv(f) for f in files]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else repr(float(x))
    return str(x)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig, args) -> int:
    data_dir = Path(args.data_dir or cfg.data_dir or "")
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    files = sorted(data_dir.glob("*.csv"))
    if not files:
        print(f"error: no input files in {data_dir}", file=sys.stderr)
        return 2
    loaded, skipped = [], []
    for f in files:
        try:
            loaded.append(md.load_ohlcv(f))
        except (TrendcastError, ValueError, OSError) as exc:
            print(f"warning: skipping {f.name}: {exc}", file=sys.stderr)
            skipped.append([f.name, str(exc)])
    out = _out(cfg)
    _write_rows(out / "skipped_files.csv", ["file", "reason"], skipped)
    if not loaded:
        print("error: every input file was rejected", file=sys.stderr)
        return 1
    cleaned = md.clean_universe(loaded)
    store = Path(getattr(args, "store", None) or out / "clean")
    store.mkdir(parents=True, exist_ok=True)
    log = []
    rows = []
    for s in cleaned:
        md.write_ohlcv(s, store / f"{s.ticker}.csv")
        log.extend(s.cleaning_log)
        r = md.daily_returns(s)
        try:
            st = md.stationarity(r)
            rows.append([s.ticker, "daily_return", _num(st.adf_stat), int(st.adf_reject_5pct),
                         _num(st.kpss_stat), int(st.kpss_reject_5pct), st.lags_used])
        except TrendcastError as exc:
            rows.append([s.ticker, "daily_return", "", "", "", "", f"skipped: {exc}"])
    md.write_cleaning_log(log, out / "cleaning_log.csv")
    _write_rows(out / "stationarity.csv",
                ["ticker", "series", "adf_stat", "adf_reject_5pct", "kpss_stat", "kpss_reject_5pct", "lags_used"], rows)
    print(f"ingested {len(cleaned)} series ({len(skipped)} skipped) into {store}")
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    rows, failed = [], 0
    for s in _load_store(cfg, args):
        try:
            sig = trend_signal(s.adj_close, cfg.trend_lookback)
            delta = make_target(sig)
            st = md.summary_stats(s, delta[np.isfinite(delta)])
        except TrendcastError as exc:
            print(f"warning: {s.ticker}: {exc}", file=sys.stderr)
            failed += 1
            continue
        rows.append([st.ticker, st.n] + [_num(getattr(st, k)) for k in
                    ("mean_pct", "std_pct", "ac1", "skewness", "kurtosis_excess", "delta_ac1")] + [";".join(st.flags)])
    _write_rows(_out(cfg) / "table1.csv", ["ticker", "n", "mean_pct", "std_pct", "ac1", "skewness",
                                           "kurtosis_excess", "delta_ac1", "flags"], rows)
    return 0 if rows else 1


def cmd_features(cfg: RunConfig, args) -> int:
    out = _out(cfg, "features")
    d = cfg.dataset()
    for s in _load_store(cfg, args):
        frame = build_feature_frame(s, d.lookbacks, d.alpha, d.rsi_window, d.macd_spans, d.winsor)
        frame.to_csv(out / f"{s.ticker}.csv")
    return 0


def _parse_subperiods(text: str):
    spans = []
    for part in text.split(","):
        a, _, b = part.partition(":")
        if not b:
            raise UsageError(f"subperiod {part!r} must look like START:END")
        spans.append((a.strip(), b.strip()))
    return spans


def cmd_backtest(cfg: RunConfig, args) -> int:
    cfg.validate(need_seed=any(m != "baseline" for m in cfg.models))
    spans = _parse_subperiods(args.subperiods) if args.subperiods else None
    results, failed = bt.run_universe(_load_store(cfg, args), cfg.models, cfg.experiment(), cfg.workers)
    out = _out(cfg, "backtest")
    sub_rows = []
    for res in results:
        t = res.row.ticker
        base_written = False
        for name, rep in res.reports.items():
            rep.model_pnl.to_csv(out / f"{t}_{name}_pnl.csv")
            if not base_written:
                rep.baseline_pnl.to_csv(out / f"{t}_baseline_pnl.csv")
                base_written = True
            if spans:
                for (a, b), m in bt.subperiod_analysis(rep, spans):
                    sub_rows.append([t, name, a, b, _num(m.rmse), _num(m.directional_accuracy),
                                     _num(m.sharpe_annualized), _num(m.cum_pnl), _num(m.pnl_gain)])
    note = POSITION_NOTE.format(mode=cfg.position_mode)
    bt.write_metrics([r.row for r in results], out / "metrics.csv", note)
    if spans:
        _write_rows(out / "subperiods.csv", ["ticker", "model", "start", "end", "rmse", "directional_accuracy",
                                              "sharpe_annualized", "cum_pnl", "pnl_gain"], sub_rows)
    for t, err in failed.items():
        print(f"warning: {t}: {err}", file=sys.stderr)
    return 0 if results else 1


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.validate(need_seed=True)
    exp = cfg.experiment()
    out = _out(cfg, "models")
    ok = 0
    for s in _load_store(cfg, args):
        try:
            samples = build_samples(s, exp.dataset)
        except TrendcastError as exc:
            print(f"warning: {s.ticker}: {exc}", file=sys.stderr)
            continue
        for name in cfg.models:
            if name == "baseline":
                continue
            try:
                _, fitted, report = bt._fit_predict(name, samples, exp)
            except Exception as exc:
                print(f"warning: {s.ticker}/{name}: {exc}", file=sys.stderr)
                continue
            if name == "lstm":
                seed = bt.derive_seed(exp.seed, s.ticker, exp.config_id(), "lstm")
                lstm.save_checkpoint(out / f"{s.ticker}_lstm.ckpt", fitted, replace(exp.train, seed=seed),
                                     report.best_epoch, {"ticker": s.ticker, "feature_names": samples.feature_names,
                                                         "window": samples.window, "clip": exp.dataset.clip})
                _write_rows(out / f"{s.ticker}_lstm_log.csv", ["epoch", "train_loss", "val_loss", "lr"],
                            [[e["epoch"], _num(e["train_loss"]), _num(e["val_loss"]), _num(e["lr"])]
                             for e in report.epoch_log])
            else:
                fitted.save(out / f"{s.ticker}_{name}.json")
            ok += 1
    return 0 if ok else 1


def cmd_grid(cfg: RunConfig, args) -> int:
    cfg.validate(need_seed=True)
    grid = cfg.grid()
    out = _out(cfg, "grid")
    base = cfg.train_config()
    ok = 0
    for s in _load_store(cfg, args):
        try:
            by_T = {T: build_samples(s, replace(cfg.dataset(), window=T)) for T in grid.lookback}
        except TrendcastError as exc:
            print(f"warning: {s.ticker}: {exc}", file=sys.stderr)
            continue
        best, _, board = bt.grid_search(by_T, grid, cfg.grid_budget, bt.derive_seed(cfg.seed, s.ticker, "grid"),
                                        base, cfg.workers)
        _write_rows(out / f"{s.ticker}_leaderboard.csv", ["rank"] + list(bt.GridSpec.AXES) + ["val_loss"],
                    [[i + 1] + [e["point"][a] for a in bt.GridSpec.AXES] + [_num(e["val_loss"])]
                     for i, e in enumerate(board)])
        _write_rows(out / f"{s.ticker}_table3.csv", ["hyperparameter", "grid", "selected"],
                    [[a, " ".join(str(v) for v in getattr(grid, a)), best[a]] for a in bt.GridSpec.AXES])
        ok += 1
    return 0 if ok else 1


def cmd_compare(cfg: RunConfig, args) -> int:
    cfg.validate(need_seed=True)
    universe = _load_store(cfg, args)
    exp = cfg.experiment()
    results, failed = bt.run_universe(universe, cfg.models, exp, cfg.workers)
    out = _out(cfg)
    plots = _out(cfg, "plots")
    rows = [r.row for r in results]
    note = POSITION_NOTE.format(mode=cfg.position_mode)
    if rows:
        bt.write_table4(rows, out / "table4.csv", note)
        bt.write_table5(rows, out / "table5.csv", "lstm", note)
        bt.write_metrics(rows, out / "metrics.csv", note)
        bt.write_cross_section(bt.cross_section(rows), out / "cross_section.csv", note)
    _write_rows(out / "failed_tickers.csv", ["ticker", "error"], sorted(failed.items()))
    for res in results:
        rep = res.reports.get("lstm") or next(iter(res.reports.values()), None)
        if rep is None:
            continue
        t = res.row.ticker
        bt.write_curve(plots / f"{t}_fig1_predicted.csv", rep.dates, rep.predictions)
        bt.write_curve(plots / f"{t}_fig1_actual.csv", rep.dates, rep.targets)
        bt.write_curve(plots / f"{t}_fig2_baseline_cum.csv", rep.dates, rep.baseline_pnl.cumulative)
        bt.write_curve(plots / f"{t}_fig2_{rep.model}_cum.csv", rep.dates, rep.model_pnl.cumulative)
    store = _store(cfg, args)
    manifest = {
        "version": __version__,
        "config": cfg.as_dict(),
        "config_id": exp.config_id(),
        "position_note": note,
        "seeds": {s.ticker: bt.derive_seed(exp.seed, s.ticker, exp.config_id(), "lstm") for s in universe},
        "data_checksums": {f.name: _sha256(f) for f in sorted(store.glob("*.csv"))
                           if not cfg.tickers or f.stem in cfg.tickers},
        "failed_tickers": dict(sorted(failed.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for t, err in failed.items():
        print(f"warning: {t}: {err}", file=sys.stderr)
    print(f"compared {len(results)} tickers ({len(failed)} failed); tables in {out}")
    return 0 if results else 1


def cmd_robustness(cfg: RunConfig, args) -> int:
    cfg.validate(need_seed=True)
    out = _out(cfg, "robustness")
    exp = cfg.experiment()
    models = [m for m in cfg.models if m != "baseline"]
    ok = 0
    for s in _load_store(cfg, args):
        rows = bt.robustness_sweep(args.kind, s, exp, models=models)
        cols = ["kind", "value", "model", "rmse", "directional_accuracy", "sharpe", "cum_pnl", "pnl_gain",
                "val_rmse", "d_rmse", "d_directional_accuracy", "d_sharpe", "d_pnl_gain", "failed"]
        _write_rows(out / f"{s.ticker}_{args.kind}.csv", cols,
                    [[_num(r.get(c, "")) if not isinstance(r.get(c), tuple) else " ".join(map(str, r[c]))
                      for c in cols] for r in rows])
        ok += 1
    return 0 if ok else 1


def cmd_theorem(cfg: RunConfig, args) -> int:
    if args.n < MIN_THEOREM_N:
        print(f"error: n={args.n} is too small for stable Monte-Carlo rates; use --n {MIN_THEOREM_N} or more "
              "(the default is 50000)", file=sys.stderr)
        return 2
    spec = tl.SyntheticSpec(n=args.n, amplitude=args.amplitude, period=args.period, rho=args.rho,
                            sigma=args.sigma, seed=cfg.seed or 0)
    try:
        spec.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    results = tl.run_suite(spec, args.repetitions, args.n_seeds, _out(cfg, "theorem"), cfg.workers)
    for name, status, detail in results:
        print(f"{status.upper():>14}  {name}: {detail}")
    return 1 if any(s == "fail" for _, s, _ in results) else 0


def cmd_report(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    metrics_path, t5 = out / "metrics.csv", out / "table5.csv"
    if not metrics_path.is_file():
        raise UsageError(f"{metrics_path} not found; run 'trendcast compare' first")
    rows = bt.read_comparison_rows(metrics_path, t5 if t5.is_file() else None)
    cs = bt.cross_section(rows)
    lines = [f"tickers: {cs.n_tickers}", f"baseline total P&L: {cs.baseline_total:.6f}"]
    for m in cs.model_totals:
        lines.append(f"{m}: total P&L {cs.model_totals[m]:.6f}, gain {cs.gain_totals[m]:+.6f}, "
                     f"wins {cs.win_count[m]}/{sum(m in r.model_cum for r in rows)} ({cs.win_rate[m]:.0%})")
    manifest = out / "manifest.json"
    if manifest.is_file():
        recorded = json.loads(manifest.read_text()).get("data_checksums", {})
        store = _store(cfg, args)
        stale = [n for n, h in recorded.items() if not (store / n).is_file() or _sha256(store / n) != h]
        lines.append("data checksums: " + ("match" if not stale else "changed for " + ", ".join(stale)))
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "stats": cmd_stats, "features": cmd_features, "backtest": cmd_backtest,
    "train": cmd_train, "grid": cmd_grid, "compare": cmd_compare, "robustness": cmd_robustness,
    "theorem": cmd_theorem, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--workers", type=int, default=d, help="parallel worker processes")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trendcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"trendcast {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "clean raw OHLCV CSVs into the store", "stats": "summary statistics table",
        "features": "engineered feature CSVs", "backtest": "per-ticker model and baseline P&L",
        "train": "fit and save models", "grid": "LSTM hyperparameter grid search",
        "compare": "cross-sectional comparison tables", "robustness": "one-axis sensitivity sweeps",
        "theorem": "synthetic differencing experiments", "report": "summarize compare outputs",
    }
    subs = {}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _global_flags(sp, suppress=True)
        if name != "theorem":
            sp.add_argument("--store", help="cleaned-series directory (default <out>/clean)")
        subs[name] = sp
    subs["ingest"].add_argument("--data-dir", help="directory of raw per-ticker CSVs")
    subs["backtest"].add_argument("--subperiods", help="comma list of START:END date ranges in the test window")
    subs["robustness"].add_argument("--kind", required=True, choices=sorted(bt.SWEEP_VALUES))
    t = subs["theorem"]
    t.add_argument("--n", type=int, default=50000)
    t.add_argument("--rho", type=float, default=0.5)
    t.add_argument("--sigma", type=float, default=1.0)
    t.add_argument("--amplitude", type=float, default=5.0)
    t.add_argument("--period", type=float, default=500.0)
    t.add_argument("--repetitions", type=int, default=20)
    t.add_argument("--n-seeds", type=int, default=50)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"bad --set {item!r}")
        try:
            updates[key] = parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.out is not None:
        updates["output_dir"] = args.out
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrendcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
