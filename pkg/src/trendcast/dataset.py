"""Supervised samples: standardized feature windows, next-day trend-difference targets, chronological splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import TooFewSamples, TooShort
from .features import DEFAULT_LOOKBACKS, DEFAULT_MACD_SPANS, build_feature_frame
from .market_data import OhlcvSeries
from .strategy import SignalSeries, aligned_returns, rolling_standardize_trailing, trend_signal

SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
CLIP_BOUND = 5.0


@dataclass
class DatasetConfig:
    lookbacks: tuple[int, ...] = DEFAULT_LOOKBACKS
    alpha: float = 1.0
    rsi_window: int = 14
    macd_spans: tuple[int, int, int] = DEFAULT_MACD_SPANS
    trend_lookback: int = 100
    window: int = 100
    clip: float = CLIP_BOUND
    target: str = "signal_diff"  # or "return"
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    include_trend_feature: bool = True
    winsor: tuple[float, float] | None = (0.01, 0.99)


@dataclass
class SampleSet:
    """Aligned arrays, one entry per sample date t.

    ``windows[k]`` holds the T x m inputs ending at t, ``targets[k]`` the
    quantity realized at t+1, ``returns[k]`` r_t and ``next_return[k]`` r_{t+1}.
    """

    windows: np.ndarray
    targets: np.ndarray
    dates: np.ndarray
    base_signal: np.ndarray
    returns: np.ndarray
    next_return: np.ndarray
    split: np.ndarray
    feature_names: list[str]
    scaling_state: dict[str, np.ndarray] = field(default_factory=dict)
    ticker: str = ""

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def window(self) -> int:
        return self.windows.shape[1]

    @property
    def n_features(self) -> int:
        return self.windows.shape[2]

    def mask(self, label: str) -> np.ndarray:
        return self.split == label

    def indices(self, label: str) -> np.ndarray:
        return np.nonzero(self.split == label)[0]

    def last_step(self) -> np.ndarray:
        """Final feature vector of each window, the input of the tabular models."""
        return self.windows[:, -1, :]

    def metadata_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "split", "target", "base_signal", "next_return"])
            for i in range(len(self)):
                w.writerow([str(self.dates[i]), self.split[i], repr(float(self.targets[i])),
                            repr(float(self.base_signal[i])), repr(float(self.next_return[i]))])


def make_target(signal: SignalSeries | np.ndarray) -> np.ndarray:
    """Delta_{t+1} = S~_{t+1} - S~_t, attached to index t (length n-1)."""
    s = signal.normalized if isinstance(signal, SignalSeries) else np.asarray(signal, dtype=np.float64)
    if len(s) < 2:
        raise TooShort("make_target needs at least 2 signal values")
    return s[1:] - s[:-1]


def rolling_standardize(values, window: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Column-wise z-score over the trailing window t-T+1..t (current row included)."""
    if window < 2:
        raise TooShort("standardization window must be >= 2")
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < window:
        raise TooShort(f"need at least {window} rows to standardize")
    z = np.column_stack([rolling_standardize_trailing(x[:, j], window) for j in range(x.shape[1])])
    means = np.full(x.shape, np.nan)
    stds = np.full(x.shape, np.nan)
    w = sliding_window_view(x, window, axis=0)
    means[window - 1:] = w.mean(axis=-1)
    stds[window - 1:] = w.std(axis=-1, ddof=1)
    return z, {"mean": means, "std": stds}


def clip(values, lo: float = -CLIP_BOUND, hi: float = CLIP_BOUND):
    if not lo < hi:
        raise ValueError("need lo < hi")
    return np.clip(values, lo, hi)


def split_sizes(n: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    """Boundaries at floor(n * cumulative fraction); the remainder goes to test."""
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n}")
    # guard against 0.7 + 0.15 style float drift just below an integer
    b1 = math.floor(n * f[0] + 1e-9)
    b2 = math.floor(n * (f[0] + f[1]) + 1e-9)
    return b1, b2 - b1, n - b2


def chrono_split(dates, fractions=DEFAULT_FRACTIONS) -> np.ndarray:
    """Label date-sorted samples train/validation/test as contiguous blocks."""
    dates = np.asarray(dates)
    if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
        raise ValueError("samples must arrive sorted by date")
    a, b, c = split_sizes(len(dates), fractions)
    return np.array(["train"] * a + ["validation"] * b + ["test"] * c)


def windows(values, window: int) -> np.ndarray:
    """All T-row windows of a (n, m) array as a read-only view of shape (n-T+1, T, m)."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < window:
        raise TooShort(f"need at least {window} rows for a window of {window}")
    return sliding_window_view(x, (window, x.shape[1]))[:, 0]


def build_samples(series: OhlcvSeries, cfg: DatasetConfig | None = None) -> SampleSet:
    cfg = cfg or DatasetConfig()
    frame = build_feature_frame(series, cfg.lookbacks, cfg.alpha, cfg.rsi_window, cfg.macd_spans, cfg.winsor)
    sig = trend_signal(series.adj_close, cfg.trend_lookback, series.dates)
    names = frame.names
    raw = frame.matrix()
    if cfg.include_trend_feature:
        names = names + ["trend"]
        raw = np.column_stack([raw, sig.normalized])
    z, state = rolling_standardize(raw, cfg.window)
    z = clip(z, -cfg.clip, cfg.clip)

    n = len(series)
    r = aligned_returns(series.adj_close)
    if cfg.target == "signal_diff":
        target = np.full(n, np.nan)
        target[:-1] = make_target(sig)
    elif cfg.target == "return":
        target = np.concatenate([r[1:], [np.nan]])
    else:
        raise ValueError(f"unknown target mode {cfg.target!r}")

    row_ok = np.all(np.isfinite(z), axis=1)
    T = cfg.window
    win_ok = np.zeros(n, dtype=bool)
    if n >= T:
        win_ok[T - 1:] = sliding_window_view(row_ok, T).all(axis=1)
    ok = win_ok & np.isfinite(target) & np.isfinite(sig.normalized)
    idx = np.nonzero(ok)[0]
    if len(idx) < 10:
        raise TooShort(f"{series.ticker}: only {len(idx)} usable samples")
    if not np.all(np.diff(idx) == 1):
        raise ValueError(f"{series.ticker}: usable samples are not contiguous")
    t0, t1 = idx[0], idx[-1]
    win = windows(z[t0 - T + 1: t1 + 1], T)
    return SampleSet(
        windows=win,
        targets=target[idx],
        dates=series.dates[idx],
        base_signal=sig.normalized[idx],
        returns=r[idx],
        next_return=r[idx + 1],
        split=chrono_split(series.dates[idx], cfg.fractions),
        feature_names=names,
        scaling_state={"mean": state["mean"][idx], "std": state["std"][idx]},
        ticker=series.ticker,
    )


def learnable_task(n: int = 1200, window: int = 100, n_features: int = 3, coef: float = 0.8,
                   noise: float = 0.01, feature_scale: float = 0.25, reversion: float = 0.1,
                   return_scale: float = 0.02, return_noise: float = 0.002,
                   seed: int = 0, fractions=DEFAULT_FRACTIONS) -> SampleSet:
    """Synthetic samples with Delta_{t+1} = coef * feature1_t + N(0, noise^2).

    feature1 leans against the current trend level so the signal stays
    stationary, and next-day returns load on the realized trend change, so a
    forecaster that recovers Delta earns more than the lagged baseline.
    """
    rng = np.random.default_rng(seed)
    total = n + window
    s = np.zeros(total + 1)
    feats = rng.normal(0.0, feature_scale, size=(total, n_features))
    eps = rng.normal(0.0, noise, size=total)
    for t in range(total):
        feats[t, 0] -= reversion * s[t]
        s[t + 1] = s[t] + coef * feats[t, 0] + eps[t]
    delta = np.diff(s)
    ret = np.zeros(total + 1)
    ret[1:] = return_scale * delta + rng.normal(0.0, return_noise, size=total)
    idx = np.arange(window - 1, window - 1 + n)
    win = windows(np.clip(feats, -CLIP_BOUND, CLIP_BOUND), window)[:n]
    dates = np.datetime64("2000-01-03", "D") + idx
    return SampleSet(
        windows=win,
        targets=delta[idx],
        dates=dates,
        base_signal=s[idx],
        returns=ret[idx],
        next_return=ret[idx + 1],
        split=chrono_split(dates, fractions),
        feature_names=[f"feature{j + 1}" for j in range(n_features)],
        ticker="SYNTH",
    )
