"""Synthetic experiments on trend-plus-AR(1) series: does differencing trade variance for bias?

Series follow y_t = m_t + eps_t with a deterministic trend m_t whose steps obey
|m_t - m_{t-1}| <= L and stationary AR(1) noise with marginal std sigma and lag-1
correlation rho. The flat-trend identity Var(eps_t - eps_{t-1}) = 2 sigma^2 (1 - rho)
is the yardstick for variance checks.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from . import linear_models as lm
from .errors import ConfigError, TooShort

TRENDS = ("sinusoid", "piecewise", "flat")
LEARNERS = ("ridge_on_lags", "small_lstm")
DEFAULT_L_SWEEP = (0.001, 0.01, 0.1)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 50000
    trend: str = "sinusoid"
    amplitude: float = 5.0
    period: float = 500.0
    slopes: tuple[float, ...] = (0.01, -0.01)
    L: float | None = None  # if set, the generated trend must respect it
    rho: float = 0.5
    sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.trend not in TRENDS:
            raise ConfigError(f"unknown trend family {self.trend!r}")
        if self.n < 2:
            raise TooShort("need n >= 2")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.trend == "sinusoid" and self.period <= 2:
            raise ConfigError("sinusoid period must exceed 2 steps")
        if self.L is not None and self.L < 0:
            raise ConfigError("L must be non-negative")

    def with_slope_bound(self, L: float) -> "SyntheticSpec":
        """Same family, rescaled so the maximal one-step trend change equals L.

        A sinusoid keeps its amplitude and changes its period; a piecewise
        trend rescales its slopes.
        """
        if self.trend == "sinusoid":
            if not 0 < L <= 2 * self.amplitude:
                raise ConfigError(f"L={L} unreachable with amplitude {self.amplitude}")
            return replace(self, period=math.pi / math.asin(L / (2 * self.amplitude)), L=L)
        if self.trend == "piecewise":
            top = max(abs(s) for s in self.slopes)
            return replace(self, slopes=tuple(s * L / top for s in self.slopes), L=L)
        return replace(self, L=L)


def trend_path(spec: SyntheticSpec) -> np.ndarray:
    t = np.arange(spec.n, dtype=np.float64)
    if spec.trend == "sinusoid":
        return spec.amplitude * np.sin(2 * np.pi * t / spec.period)
    if spec.trend == "piecewise":
        seg = np.minimum((t * len(spec.slopes) // spec.n).astype(int), len(spec.slopes) - 1)
        steps = np.asarray(spec.slopes, dtype=np.float64)[seg]
        return np.concatenate([[0.0], np.cumsum(steps[1:])])
    return np.zeros(spec.n)


def slope_bound(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.abs(np.diff(m)).max()) if len(m) > 1 else 0.0


def ar1_noise(n: int, rho: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) with Var(eps_t) = sigma^2 for every t."""
    u = rng.standard_normal(n)
    u[0] *= sigma
    u[1:] *= sigma * math.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], u)


def generate(spec: SyntheticSpec, rng: np.random.Generator | None = None):
    """Return (y, m, eps) with y = m + eps."""
    spec.validate()
    m = trend_path(spec)
    if spec.L is not None and slope_bound(m) > spec.L * (1 + 1e-9) + 1e-15:
        raise ConfigError(f"trend steps reach {slope_bound(m):.6g} > L={spec.L}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    eps = ar1_noise(spec.n, spec.rho, spec.sigma, rng)
    return m + eps, m, eps


def variance_comparison(spec: SyntheticSpec, rng=None) -> tuple[float, float]:
    """Sample variances (ddof=1) of y and of its first difference."""
    y, _, _ = generate(spec, rng)
    return float(np.var(y, ddof=1)), float(np.var(np.diff(y), ddof=1))


def delta_noise_variance(spec: SyntheticSpec, n_batches: int = 100, rng=None):
    """Estimate Var(eps_t - eps_{t-1}) with a batch-means standard error.

    Returns (estimate, standard error, closed form 2 sigma^2 (1 - rho)).
    """
    _, _, eps = generate(spec, rng)
    d = np.diff(eps)
    if len(d) < 2 * n_batches:
        raise TooShort("too few observations for the requested number of batches")
    est = float(np.var(d, ddof=1))
    usable = len(d) - len(d) % n_batches
    batch_vars = d[:usable].reshape(n_batches, -1).var(axis=1, ddof=1)
    se = float(batch_vars.std(ddof=1) / math.sqrt(n_batches))
    return est, se, 2.0 * spec.sigma ** 2 * (1.0 - spec.rho)


def lag_matrix(x, k: int):
    """Rows (x_{t-1}, ..., x_{t-k}) with target x_t, for t = k..n-1."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= k:
        raise TooShort(f"need more than {k} observations")
    w = sliding_window_view(x, k + 1)
    return w[:, :k][:, ::-1], w[:, k]


# ---------------------------------------------------------------------------
# estimator experiment


@dataclass
class BiasVarReport:
    """Level task vs difference task, across noise redraws with the trend held fixed.

    ``bias_*`` is the mean absolute gap between the expected prediction and
    the truth on held-out dates. For the ridge learner the expectation over
    held-out noise is exact by linearity: the seed-averaged fitted map is
    applied to the noise-free lag window. ``bias_*_seedmean`` uses the plain
    average of noisy predictions, which also carries a Monte-Carlo floor of
    about sqrt(estimator_var / n_seeds).
    """

    learner: str
    L: float
    n_seeds: int
    var_y: float
    var_delta: float
    estimator_var_y: float
    estimator_var_delta: float
    bias_y: float
    bias_delta: float
    bias_y_seedmean: float
    bias_delta_seedmean: float

    @property
    def bias_gap(self) -> float:
        return self.bias_delta - self.bias_y

    @property
    def var_ratio(self) -> float:
        return self.estimator_var_delta / self.estimator_var_y if self.estimator_var_y > 0 else float("nan")


def _fit_predict_ridge(X_tr, y_tr, X_eval, lam):
    fit = lm.fit_ridge(X_tr, y_tr, lam)
    return [lm.predict(fit, X) for X in X_eval]


def _fit_predict_lstm(X_tr, y_tr, X_eval, seed, lstm_cfg):
    from . import lstm
    from .dataset import SampleSet

    n = len(y_tr)
    nva = max(n // 8, 1)
    split = np.array(["train"] * (n - nva) + ["validation"] * nva)
    win = X_tr[:, ::-1, None]  # oldest lag first
    s = SampleSet(win, y_tr, np.arange(n), np.zeros(n), np.zeros(n), np.zeros(n), split, ["lag"])
    params, _ = lstm.train(s, replace(lstm_cfg, seed=seed))
    return [lstm.predict(params, X[:, ::-1, None]) for X in X_eval]


def _seed_run(args):
    spec, i, learner, lags, lam, train_frac, lstm_cfg = args
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i,)))
    y, m, _ = generate(spec, rng)
    out = {"var_y": float(np.var(y, ddof=1)), "var_delta": float(np.var(np.diff(y), ddof=1))}
    for task, obs, clean in (("y", y, m), ("delta", np.diff(y), np.diff(m))):
        X, target = lag_matrix(obs, lags)
        Xc, truth = lag_matrix(clean, lags)
        cut = int(train_frac * len(target))
        if learner == "ridge_on_lags":
            pred, pred_clean = _fit_predict_ridge(X[:cut], target[:cut], (X[cut:], Xc[cut:]), lam)
        else:
            pred, pred_clean = _fit_predict_lstm(X[:cut], target[:cut], (X[cut:], Xc[cut:]),
                                                 int(rng.integers(2**31)), lstm_cfg)
        out[task] = (pred, pred_clean, truth[cut:])
    return out


def estimator_experiment(spec: SyntheticSpec, learner: str = "ridge_on_lags", n_seeds: int = 50,
                         lags: int = 10, lam: float = 1.0, train_frac: float = 0.8,
                         workers: int = 1, lstm_cfg=None) -> BiasVarReport:
    """Train the same learner on lags of y (target y_t) and of Delta y (target Delta y_t).

    Noise is redrawn per seed from the stream (spec.seed, seed index); the trend
    is fixed, so held-out predictions vary only through the noise.
    """
    if learner not in LEARNERS:
        raise ConfigError(f"unknown learner {learner!r}")
    if n_seeds < 2:
        raise ConfigError("need at least 2 seeds for a variance")
    if learner == "small_lstm" and lstm_cfg is None:
        from . import lstm
        lstm_cfg = lstm.TrainConfig(hidden_size=8, dropout=0.0, max_epochs=20, batch_size=128)
    jobs = [(spec, i, learner, lags, lam, train_frac, lstm_cfg) for i in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_seed_run, jobs))
    else:
        runs = [_seed_run(j) for j in jobs]

    stats = {}
    for task in ("y", "delta"):
        P = np.array([r[task][0] for r in runs])
        C = np.array([r[task][1] for r in runs])
        truth = runs[0][task][2]
        est_var = float(P.var(axis=0, ddof=1).mean())
        seedmean = float(np.abs(P.mean(axis=0) - truth).mean())
        expected = C.mean(axis=0) if learner == "ridge_on_lags" else P.mean(axis=0)
        stats[task] = (est_var, float(np.abs(expected - truth).mean()), seedmean)
    L = spec.L if spec.L is not None else slope_bound(trend_path(spec))
    return BiasVarReport(
        learner, float(L), n_seeds,
        float(np.mean([r["var_y"] for r in runs])), float(np.mean([r["var_delta"] for r in runs])),
        stats["y"][0], stats["delta"][0], stats["y"][1], stats["delta"][1], stats["y"][2], stats["delta"][2],
    )


def variance_reduction_rate(spec: SyntheticSpec, repetitions: int = 20, n_seeds: int = 50, **kw):
    """Fraction of independent repetitions with estimator_var_delta < estimator_var_y."""
    reports = [estimator_experiment(replace(spec, seed=derive_rep_seed(spec.seed, r)), n_seeds=n_seeds, **kw)
               for r in range(repetitions)]
    wins = sum(r.estimator_var_delta < r.estimator_var_y for r in reports)
    return wins / repetitions, reports


def derive_rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(10_000 + rep,)).generate_state(1)[0])


@dataclass
class BiasSweep:
    L: np.ndarray
    gap: np.ndarray
    slope: float
    intercept: float  # envelope intercept, LS intercept plus the largest residual
    monotone: bool
    within_envelope: bool
    reports: list[BiasVarReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.monotone and self.within_envelope


def bias_sweep(spec: SyntheticSpec, L_values=DEFAULT_L_SWEEP, n_seeds: int = 50, **kw) -> BiasSweep:
    """Bias gap across slope bounds, with common noise seeds for every L.

    The envelope is the least-squares slope c lifted by the largest residual,
    so every point lies on or under a + offset + c L. Growth counts as at most
    linear when that slope is finite and non-negative.
    """
    L = np.asarray(sorted(L_values), dtype=np.float64)
    if len(L) < 2:
        raise ConfigError("sweep needs at least two L values")
    reports = [estimator_experiment(spec.with_slope_bound(float(x)), n_seeds=n_seeds, **kw) for x in L]
    gap = np.array([r.bias_gap for r in reports])
    c, a = np.polyfit(L, gap, 1)
    monotone = bool(np.all(np.diff(gap) >= -1e-12))
    offset = float(np.max(gap - (a + c * L)))
    within = bool(np.isfinite(c) and c >= 0)
    return BiasSweep(L, gap, float(c), float(a) + offset, monotone, within, reports)


# ---------------------------------------------------------------------------
# output


REPORT_COLUMNS = ("learner", "L", "n_seeds", "var_y", "var_delta", "estimator_var_y", "estimator_var_delta",
                  "bias_y", "bias_delta", "bias_y_seedmean", "bias_delta_seedmean")


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            d = asdict(r)
            w.writerow([d[c] if isinstance(d[c], str) else repr(d[c]) for c in REPORT_COLUMNS])


def write_sweep(sweep: BiasSweep, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "bias_gap", "var_ratio"])
        for x, g, r in zip(sweep.L, sweep.gap, sweep.reports):
            w.writerow([repr(float(x)), repr(float(g)), repr(r.var_ratio)])


def run_suite(spec: SyntheticSpec | None = None, repetitions: int = 20, n_seeds: int = 50,
              out_dir: str | Path | None = None, workers: int = 1) -> list[tuple[str, str, str]]:
    """All theorem properties as (name, status, detail); status is pass, fail or not applicable."""
    spec = spec or SyntheticSpec()
    spec.validate()
    results = []
    premise = spec.rho > 0

    vy, vd = variance_comparison(spec)
    if premise:
        results.append(("input variance", "pass" if vd < vy else "fail", f"Var(dy)={vd:.6g} Var(y)={vy:.6g}"))
    else:
        results.append(("input variance", "not applicable", f"rho={spec.rho} <= 0; premise unmet"))

    flat = replace(spec, trend="flat", n=max(spec.n, 100000), L=None)
    est, se, theory = delta_noise_variance(flat)
    ok = abs(est - theory) <= 3 * se
    results.append(("difference-noise identity", "pass" if ok else "fail",
                    f"estimate={est:.6g} theory={theory:.6g} se={se:.3g}"))

    if premise:
        rate, reports = variance_reduction_rate(spec, repetitions, n_seeds, workers=workers)
        results.append(("estimator variance", "pass" if rate >= 0.9 else "fail",
                        f"{rate:.0%} of {repetitions} repetitions"))
    else:
        reports = []
        results.append(("estimator variance", "not applicable", f"rho={spec.rho} <= 0; premise unmet"))

    sweep = bias_sweep(spec, n_seeds=n_seeds, workers=workers)
    results.append(("bias gap growth", "pass" if sweep.passed else "fail",
                    "gaps=" + ",".join(f"{g:.4g}" for g in sweep.gap) + f" slope={sweep.slope:.4g}"))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_reports(reports, out / "theorem_estimator_reports.csv")
        write_reports(sweep.reports, out / "theorem_bias_sweep_reports.csv")
        write_sweep(sweep, out / "theorem_sweep.csv")
        with open(out / "theorem_results.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["property", "status", "detail"])
            w.writerows(results)
    return results
