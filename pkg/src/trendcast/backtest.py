"""Per-ticker experiments, metrics, model-driven P&L and cross-sectional tables."""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import gbt as gbt_mod
from . import linear_models as lm
from . import lstm
from .dataset import DatasetConfig, SampleSet, build_samples
from .errors import EmptySlice, LengthMismatch
from .market_data import OhlcvSeries
from .strategy import DEFAULT_COST_BPS, PnlSeries, PositionSeries, pnl

logger = logging.getLogger(__name__)

MODELS = ("lstm", "ols", "lasso", "ridge", "gbt")
TRADING_DAYS = 252
POSITION_MODES = ("anticipated_trend", "tanh_forecast")


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary key parts (independent of PYTHONHASHSEED)."""
    key = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


# ---------------------------------------------------------------------------
# metrics and positions


@dataclass
class Metrics:
    rmse: float
    directional_accuracy: float
    sharpe_annualized: float
    cum_pnl: float
    pnl_gain: float
    flags: tuple[str, ...] = ()


def annualized_sharpe(daily) -> float:
    d = np.asarray(daily, dtype=np.float64)
    if len(d) < 2:
        return float("nan")
    sd = d.std(ddof=1)
    if not sd > 0:
        return float("nan")
    return float(d.mean() / sd * math.sqrt(TRADING_DAYS))


def metrics(predictions, targets, model_pnl: PnlSeries, baseline_pnl: PnlSeries) -> Metrics:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or len(model_pnl.daily) != len(p) or len(baseline_pnl.daily) != len(p):
        raise LengthMismatch("predictions, targets and P&L series must align")
    if len(p) < 2:
        raise LengthMismatch("metrics need at least 2 observations")
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    # a zero forecast only scores when the target is also exactly zero
    hit = float(np.mean(np.sign(p) == np.sign(t)))
    sharpe = annualized_sharpe(model_pnl.daily)
    flags = ("sharpe_undefined",) if math.isnan(sharpe) else ()
    cum = model_pnl.total
    return Metrics(rmse, hit, sharpe, cum, cum - baseline_pnl.total, flags)


def positions_from_forecast(base_signal, predictions, mode: str = "anticipated_trend",
                            gamma: float = 2.0, dates=None) -> PositionSeries:
    """Map forecasts of the next trend difference to positions in [-1, 1].

    ``anticipated_trend`` trades the predicted next-day signal S~_t + Delta^_{t+1};
    ``tanh_forecast`` uses tanh(gamma * Delta^_{t+1}) as in the Sharpe loss.
    """
    s = np.asarray(base_signal, dtype=np.float64)
    d = np.asarray(predictions, dtype=np.float64)
    if s.shape != d.shape:
        raise LengthMismatch(f"signal {s.shape} vs predictions {d.shape}")
    if mode == "anticipated_trend":
        w = np.clip(s + d, -1.0, 1.0)
    elif mode == "tanh_forecast":
        w = np.tanh(gamma * d)
    else:
        raise ValueError(f"unknown position mode {mode!r}")
    return PositionSeries(dates, np.where(np.isfinite(w), w, 0.0))


# ---------------------------------------------------------------------------
# reports


@dataclass
class BacktestReport:
    """Test-window evaluation of one forecaster against the baseline."""

    model: str
    ticker: str
    dates: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray
    returns: np.ndarray
    weights: np.ndarray
    baseline_weights: np.ndarray
    prev_weight: float
    baseline_prev_weight: float
    cost_bps: float
    model_pnl: PnlSeries
    baseline_pnl: PnlSeries
    metrics: Metrics


def evaluate_forecast(samples: SampleSet, predictions, model: str, cost_bps: float = DEFAULT_COST_BPS,
                      mode: str = "anticipated_trend", gamma: float = 2.0, split: str = "test") -> BacktestReport:
    """Score forecasts for every sample on ``split``; positions entering the split carry in."""
    pred_all = np.asarray(predictions, dtype=np.float64)
    if len(pred_all) != len(samples):
        raise LengthMismatch("need one prediction per sample")
    w_model = positions_from_forecast(samples.base_signal, pred_all, mode, gamma).weights
    w_base = np.clip(np.where(np.isfinite(samples.base_signal), samples.base_signal, 0.0), -1.0, 1.0)
    idx = samples.indices(split)
    if len(idx) == 0:
        raise EmptySlice(f"no samples in split {split!r}")
    k0 = idx[0]
    prev_m = float(w_model[k0 - 1]) if k0 > 0 else 0.0
    prev_b = float(w_base[k0 - 1]) if k0 > 0 else 0.0
    dates = samples.dates[idx]
    mp = pnl(w_model[idx], samples.returns[idx], cost_bps, prev_m, dates)
    bp = pnl(w_base[idx], samples.returns[idx], cost_bps, prev_b, dates)
    m = metrics(pred_all[idx], samples.targets[idx], mp, bp)
    return BacktestReport(model, samples.ticker, dates, pred_all[idx], samples.targets[idx],
                          samples.returns[idx], w_model[idx], w_base[idx], prev_m, prev_b, cost_bps, mp, bp, m)


def subperiod_analysis(report: BacktestReport, boundaries) -> list[tuple[tuple, Metrics]]:
    """Recompute metrics on inclusive date ranges ``(start, end)`` of the test window.

    Each slice keeps the positions held on the day before it starts, so a
    partition of the window reproduces the full-window cumulative P&L.
    """
    dates = report.dates
    spans = []
    for a, b in boundaries:
        a, b = np.datetime64(a, "D"), np.datetime64(b, "D")
        if b < a:
            raise ValueError(f"empty range {a}..{b}")
        spans.append((a, b))
    spans.sort()
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        if a2 <= b1:
            raise ValueError("subperiods overlap")
    out = []
    for a, b in spans:
        if a < dates[0] or b > dates[-1]:
            raise ValueError(f"range {a}..{b} falls outside the test window")
        sel = np.nonzero((dates >= a) & (dates <= b))[0]
        if len(sel) == 0:
            raise EmptySlice(f"no test dates in {a}..{b}")
        k0 = sel[0]
        pm = report.weights[k0 - 1] if k0 > 0 else report.prev_weight
        pb = report.baseline_weights[k0 - 1] if k0 > 0 else report.baseline_prev_weight
        mp = pnl(report.weights[sel], report.returns[sel], report.cost_bps, pm, dates[sel])
        bp = pnl(report.baseline_weights[sel], report.returns[sel], report.cost_bps, pb, dates[sel])
        if len(sel) < 2:
            m = Metrics(float(abs(report.predictions[sel] - report.targets[sel])[0]),
                        float(np.sign(report.predictions[sel][0]) == np.sign(report.targets[sel][0])),
                        float("nan"), mp.total, mp.total - bp.total, ("sharpe_undefined",))
        else:
            m = metrics(report.predictions[sel], report.targets[sel], mp, bp)
        out.append(((str(dates[sel[0]]), str(dates[sel[-1]])), m))
    return out


# ---------------------------------------------------------------------------
# experiment orchestration


@dataclass
class GbtConfig:
    n_trees: int = 200
    learning_rate: float = 0.05
    max_depth: int = 3
    min_leaf: int = 20
    early_stop_rounds: int = 20


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: lstm.TrainConfig = field(default_factory=lstm.TrainConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    cost_bps: float = DEFAULT_COST_BPS
    position_mode: str = "anticipated_trend"
    lambda_grid: tuple[float, ...] = lm.LAMBDA_GRID
    seed: int = 0

    def config_id(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()[:12]


@dataclass
class ComparisonRow:
    ticker: str
    baseline_cum: float
    model_cum: dict[str, float] = field(default_factory=dict)
    pnl_gain: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, Metrics] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


@dataclass
class TickerResult:
    row: ComparisonRow
    reports: dict[str, BacktestReport] = field(default_factory=dict)
    train_reports: dict[str, object] = field(default_factory=dict)
    fitted: dict[str, object] = field(default_factory=dict)
    val_rmse: dict[str, float] = field(default_factory=dict)


def _fit_predict(name: str, samples: SampleSet, cfg: ExperimentConfig):
    """Fit one model family; return (predictions for every sample, fitted object, train report)."""
    tr, va = samples.indices("train"), samples.indices("validation")
    X = samples.last_step()
    y = samples.targets
    names = samples.feature_names
    if name == "lstm":
        seed = derive_seed(cfg.seed, samples.ticker, cfg.config_id(), "lstm")
        params, report = lstm.train(samples, replace(cfg.train, seed=seed))
        return lstm.predict(params, samples.windows), params, report
    if name == "ols":
        fit = lm.fit_ols(X[tr], y[tr], names)
        return lm.predict(fit, X), fit, None
    if name in ("ridge", "lasso"):
        fit, scores = lm.select_lambda(name, X[tr], y[tr], X[va], y[va], cfg.lambda_grid, names)
        return lm.predict(fit, X), fit, {"lambda_scores": scores}
    if name == "gbt":
        g = cfg.gbt
        model = gbt_mod.fit_gbt(X[tr], y[tr], X[va], y[va], g.n_trees, g.learning_rate, g.max_depth,
                                g.min_leaf, g.early_stop_rounds)
        return gbt_mod.predict_gbt(model, X), model, {"best_round": model.best_round}
    raise ValueError(f"unknown model {name!r}")


def run_samples(samples: SampleSet, models: Iterable[str] = MODELS, cfg: ExperimentConfig | None = None) -> TickerResult:
    cfg = cfg or ExperimentConfig()
    zero = evaluate_forecast(samples, np.zeros(len(samples)), "baseline", cfg.cost_bps, "anticipated_trend")
    result = TickerResult(ComparisonRow(samples.ticker, zero.baseline_pnl.total))
    va = samples.indices("validation")
    for name in models:
        if name == "baseline":
            continue
        try:
            preds, fitted, report = _fit_predict(name, samples, cfg)
            rep = evaluate_forecast(samples, preds, name, cfg.cost_bps, cfg.position_mode, cfg.train.gamma)
        except Exception as exc:  # one failing model must not sink the others
            logger.warning("%s/%s failed: %s", samples.ticker, name, exc)
            result.row.failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        result.reports[name] = rep
        result.fitted[name] = fitted
        result.train_reports[name] = report
        result.val_rmse[name] = float(np.sqrt(np.mean((preds[va] - samples.targets[va]) ** 2)))
        result.row.model_cum[name] = rep.metrics.cum_pnl
        result.row.pnl_gain[name] = rep.metrics.cum_pnl - result.row.baseline_cum
        result.row.metrics[name] = rep.metrics
    return result


def run_ticker(series: OhlcvSeries, models: Iterable[str] = MODELS, cfg: ExperimentConfig | None = None) -> TickerResult:
    cfg = cfg or ExperimentConfig()
    return run_samples(build_samples(series, cfg.dataset), models, cfg)


def _run_ticker_safe(series: OhlcvSeries, models, cfg):
    try:
        return series.ticker, run_ticker(series, models, cfg), None
    except Exception as exc:
        logger.warning("%s failed: %s", series.ticker, exc)
        return series.ticker, None, f"{type(exc).__name__}: {exc}"


def run_universe(universe: Sequence[OhlcvSeries], models=MODELS, cfg: ExperimentConfig | None = None,
                 workers: int = 1) -> tuple[list[TickerResult], dict[str, str]]:
    """Independent per-ticker jobs merged in ticker order; returns (results, failed tickers)."""
    cfg = cfg or ExperimentConfig()
    models = tuple(models)
    if workers > 1 and len(universe) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_run_ticker_safe, universe, itertools.repeat(models), itertools.repeat(cfg)))
    else:
        outcomes = [_run_ticker_safe(s, models, cfg) for s in universe]
    outcomes.sort(key=lambda o: o[0])
    return [o[1] for o in outcomes if o[1] is not None], {o[0]: o[2] for o in outcomes if o[1] is None}


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSpec:
    epochs: tuple[int, ...] = (50, 100, 150)
    batch: tuple[int, ...] = (32, 64, 128)
    lookback: tuple[int, ...] = (50, 100, 150)
    units: tuple[int, ...] = (32, 64, 128)
    dropout: tuple[float, ...] = (0.1, 0.2, 0.3)
    gamma: tuple[float, ...] = (1.0, 2.0, 3.0)

    AXES = ("epochs", "batch", "lookback", "units", "dropout", "gamma")

    def points(self) -> list[tuple]:
        return list(itertools.product(*(getattr(self, a) for a in self.AXES)))

    def __contains__(self, point) -> bool:
        if isinstance(point, dict):
            point = tuple(point[a] for a in self.AXES)
        return all(v in getattr(self, a) for a, v in zip(self.AXES, point))


SELECTED_POINT = {"epochs": 100, "batch": 64, "lookback": 100, "units": 64, "dropout": 0.2, "gamma": 2.0}


def point_to_config(point: dict, base: lstm.TrainConfig) -> lstm.TrainConfig:
    return replace(base, max_epochs=point["epochs"], batch_size=point["batch"], hidden_size=point["units"],
                   dropout=point["dropout"], gamma=point["gamma"])


def _eval_point(args):
    samples, point, base, seed = args
    cfg = point_to_config(point, replace(base, seed=seed))
    _, report = lstm.train(samples, cfg)
    return report.final["val_loss"], report


def grid_search(samples_by_lookback: dict[int, SampleSet], grid: GridSpec | None = None,
                budget: int | None = None, seed: int = 0, base: lstm.TrainConfig | None = None,
                workers: int = 1, evaluate: Callable | None = None):
    """Pick the grid point with the lowest validation loss.

    ``budget`` draws a seeded uniform subsample of the Cartesian product.
    Per-point training seeds derive from the point itself, so the result
    does not depend on evaluation order. Returns (best point, best
    TrainConfig, leaderboard sorted by (val_loss, point)).
    """
    grid = grid or GridSpec()
    base = base or lstm.TrainConfig()
    points = grid.points()
    if not points:
        raise ValueError("empty grid")
    if budget is not None and budget < len(points):
        pick = np.random.default_rng(seed).choice(len(points), size=budget, replace=False)
        points = [points[i] for i in sorted(pick)]
    dicts = [dict(zip(GridSpec.AXES, p)) for p in points]
    if evaluate is None:
        jobs = [(samples_by_lookback[d["lookback"]], d, base, derive_seed(seed, tuple(d.values())))
                for d in dicts]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                outcomes = list(ex.map(_eval_point, jobs))
        else:
            outcomes = [_eval_point(j) for j in jobs]
        losses = [o[0] for o in outcomes]
    else:
        losses = [float(evaluate(d)) for d in dicts]
    board = sorted(({"point": d, "val_loss": l} for d, l in zip(dicts, losses)),
                   key=lambda e: (e["val_loss"], tuple(e["point"].values())))
    best = board[0]["point"]
    return best, point_to_config(best, base), board


# ---------------------------------------------------------------------------
# cross-section


@dataclass
class CrossSection:
    n_tickers: int
    baseline_total: float
    model_totals: dict[str, float]
    gain_totals: dict[str, float]
    win_count: dict[str, int]
    win_rate: dict[str, float]
    quantiles: dict[str, dict[str, tuple[float, float, float]]]


def cross_section(rows: Sequence[ComparisonRow]) -> CrossSection:
    """Sums, win counts and per-metric (P25, median, P75) across tickers."""
    if not rows:
        raise ValueError("cross_section needs at least one row")
    models = sorted({m for r in rows for m in r.model_cum}, key=lambda m: (MODELS + (m,)).index(m))
    base_total = float(sum(r.baseline_cum for r in rows))
    totals, gains, wins, rates, quants = {}, {}, {}, {}, {}
    for m in models:
        have = [r for r in rows if m in r.model_cum]
        totals[m] = float(sum(r.model_cum[m] for r in have))
        gains[m] = float(sum(r.pnl_gain[m] for r in have))
        wins[m] = int(sum(r.pnl_gain[m] > 0 for r in have))
        rates[m] = wins[m] / len(have)
        q = {}
        for metric in ("rmse", "directional_accuracy", "sharpe_annualized", "cum_pnl", "pnl_gain"):
            vals = np.array([getattr(r.metrics[m], metric) for r in have if m in r.metrics], dtype=float)
            vals = vals[np.isfinite(vals)]
            q[metric] = tuple(float(x) for x in np.percentile(vals, [25, 50, 75])) if len(vals) else (math.nan,) * 3
        quants[m] = q
    return CrossSection(len(rows), base_total, totals, gains, wins, rates, quants)


# ---------------------------------------------------------------------------
# robustness


SWEEP_VALUES = {
    "lookback": [(25,), (50,), (100,), (200,), (300,)],
    "rsi": [7, 14, 21],
    "macd": [(8, 17, 9), (12, 26, 9), (16, 33, 9)],
    "early_stopping": [True, False],
}


def _apply_sweep(kind: str, value, cfg: ExperimentConfig) -> ExperimentConfig:
    if kind == "lookback":
        return replace(cfg, dataset=replace(cfg.dataset, lookbacks=tuple(value)))
    if kind == "rsi":
        return replace(cfg, dataset=replace(cfg.dataset, rsi_window=int(value)))
    if kind == "macd":
        return replace(cfg, dataset=replace(cfg.dataset, macd_spans=tuple(value)))
    if kind == "early_stopping":
        return replace(cfg, train=replace(cfg.train, early_stopping=bool(value)))
    raise ValueError(f"unknown sweep kind {kind!r}")


def robustness_sweep(kind: str, data, base: ExperimentConfig | None = None, values=None,
                     models: Iterable[str] = ("lstm",)) -> list[dict]:
    """Vary one axis, rerun the experiment, and tabulate metric deltas against ``base``.

    ``data`` is an OhlcvSeries, or a prepared SampleSet for the
    early-stopping axis (feature axes need raw prices).
    """
    base = base or ExperimentConfig()
    if kind not in SWEEP_VALUES:
        raise ValueError(f"unknown sweep kind {kind!r}")
    values = SWEEP_VALUES[kind] if values is None else list(values)
    models = tuple(models)

    def run(cfg):
        if isinstance(data, SampleSet):
            if kind != "early_stopping":
                raise ValueError(f"{kind} sweep needs a price series, not prepared samples")
            return run_samples(data, models, cfg)
        return run_ticker(data, models, cfg)

    ref = run(base)
    rows = []
    for v in values:
        res = run(_apply_sweep(kind, v, base))
        for m in models:
            if m not in res.row.metrics or m not in ref.row.metrics:
                rows.append({"kind": kind, "value": v, "model": m, "failed": res.row.failures.get(m, "missing")})
                continue
            a, b = res.row.metrics[m], ref.row.metrics[m]
            rows.append({
                "kind": kind, "value": v, "model": m,
                "rmse": a.rmse, "directional_accuracy": a.directional_accuracy,
                "sharpe": a.sharpe_annualized, "cum_pnl": a.cum_pnl, "pnl_gain": a.pnl_gain,
                "val_rmse": res.val_rmse[m],
                "d_rmse": a.rmse - b.rmse,
                "d_directional_accuracy": a.directional_accuracy - b.directional_accuracy,
                "d_sharpe": a.sharpe_annualized - b.sharpe_annualized,
                "d_pnl_gain": a.pnl_gain - b.pnl_gain,
            })
    return rows


# ---------------------------------------------------------------------------
# table writers


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _write(path, header: list[str], rows: list[list], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_table4(rows: Sequence[ComparisonRow], path, comment: str | None = None) -> None:
    """PNL gain per model, one row per ticker, plus TOTAL."""
    models = [m for m in MODELS]
    body = [[r.ticker] + [r.pnl_gain.get(m, float("nan")) for m in models] for r in rows]
    totals = ["TOTAL"] + [float(sum(r.pnl_gain[m] for r in rows if m in r.pnl_gain)) for m in models]
    _write(path, ["ticker"] + models, body + [totals], comment)


def write_table5(rows: Sequence[ComparisonRow], path, model: str = "lstm", comment: str | None = None) -> None:
    """Baseline vs model cumulative P&L per ticker, plus Total with the win count."""
    body, wins, n = [], 0, 0
    for r in rows:
        mc = r.model_cum.get(model, float("nan"))
        working = int(model in r.pnl_gain and r.pnl_gain[model] > 0)
        wins += working
        n += model in r.model_cum
        body.append([r.ticker, r.baseline_cum, mc, working])
    total = ["Total", float(sum(r.baseline_cum for r in rows)),
             float(sum(r.model_cum[model] for r in rows if model in r.model_cum)), wins]
    _write(path, ["ticker", "baseline_pnl", f"{model}_pnl", "working"], body + [total], comment)


def write_metrics(rows: Sequence[ComparisonRow], path, comment: str | None = None) -> None:
    body = []
    for r in rows:
        for m in MODELS:
            if m in r.metrics:
                x = r.metrics[m]
                body.append([r.ticker, m, x.rmse, x.directional_accuracy, x.sharpe_annualized,
                             x.cum_pnl, x.pnl_gain, ";".join(x.flags)])
            elif m in r.failures:
                body.append([r.ticker, m, "", "", "", "", "", "failed: " + r.failures[m]])
    _write(path, ["ticker", "model", "rmse", "directional_accuracy", "sharpe_annualized",
                  "cum_pnl", "pnl_gain", "flags"], body, comment)


def write_cross_section(cs: CrossSection, path, comment: str | None = None) -> None:
    body = []
    for m, q in cs.quantiles.items():
        for metric, (p25, med, p75) in q.items():
            body.append([m, metric, p25, med, p75])
    _write(path, ["model", "metric", "p25", "median", "p75"], body, comment)


def write_curve(path, dates, values) -> None:
    _write(path, ["date", "value"], [[str(d), float(v)] for d, v in zip(dates, values)])


def read_comparison_rows(metrics_path, table5_path=None) -> list[ComparisonRow]:
    """Rebuild ComparisonRows from a metrics CSV (and its table5 for baseline P&L)."""
    def rows_of(path):
        with open(path, newline="") as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))

    baseline = {}
    if table5_path is not None:
        for r in rows_of(table5_path):
            if r["ticker"] != "Total":
                baseline[r["ticker"]] = float(r["baseline_pnl"])
    out: dict[str, ComparisonRow] = {}
    for r in rows_of(metrics_path):
        t = r["ticker"]
        row = out.setdefault(t, ComparisonRow(t, baseline.get(t, 0.0)))
        if r["flags"].startswith("failed"):
            row.failures[r["model"]] = r["flags"]
            continue
        num = lambda k: float(r[k]) if r[k] else float("nan")
        m = Metrics(num("rmse"), num("directional_accuracy"), num("sharpe_annualized"), num("cum_pnl"),
                    num("pnl_gain"), tuple(f for f in r["flags"].split(";") if f))
        row.metrics[r["model"]] = m
        row.model_cum[r["model"]] = m.cum_pnl
        row.pnl_gain[r["model"]] = m.pnl_gain
    return [out[k] for k in sorted(out)]
