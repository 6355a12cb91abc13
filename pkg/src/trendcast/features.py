"""Engineered per-date features: rolling return moments, t-stat trend, RSI, MACD.

Every rolling statistic at date t uses the strictly past window t-l..t-1,
so a feature value never sees the same-day observation it sits next to.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadSpans, TooShort, WindowTooLarge
from .market_data import OhlcvSeries, daily_returns, winsorize

DEFAULT_LOOKBACKS = (50, 100, 300)
DEFAULT_MACD_SPANS = (12, 26, 9)
ALPHA_GRID = (0.5, 1.0, 2.0)


@dataclass
class FeatureFrame:
    ticker: str
    dates: np.ndarray
    columns: dict[str, np.ndarray]
    valid_from: int

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def matrix(self, names=None) -> np.ndarray:
        names = self.names if names is None else names
        return np.column_stack([self.columns[c] for c in names])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date"] + self.names)
            cols = [self.columns[c] for c in self.names]
            for i, d in enumerate(self.dates):
                w.writerow([str(d)] + ["" if np.isnan(c[i]) else repr(float(c[i])) for c in cols])


def _past_windows(x: np.ndarray, window: int) -> np.ndarray:
    """Windows x[t-window..t-1] for t = window..n-1, stacked row-wise."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if window > len(x):
        raise WindowTooLarge(f"window {window} exceeds series length {len(x)}")
    return sliding_window_view(x, window)[:-1]


def rolling_sma(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.full(len(x), np.nan)
    out[window:] = _past_windows(x, window).mean(axis=1)
    return out


def rolling_vol(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.full(len(x), np.nan)
    out[window:] = _past_windows(x, window).std(axis=1, ddof=1)
    return out


def tstat_signal(returns, window: int, alpha: float = 1.0) -> np.ndarray:
    """tanh(alpha * T) with T the rolling t-statistic; T := 0 when the window std is 0."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    r = np.asarray(returns, dtype=np.float64)
    w = _past_windows(r, window)
    mean = w.mean(axis=1)
    std = w.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(std > 0, mean / (std / np.sqrt(window)), 0.0)
    t[np.isnan(mean)] = np.nan
    out = np.full(len(r), np.nan)
    out[window:] = np.tanh(alpha * t)
    return out


def rsi(prices, window: int = 14) -> np.ndarray:
    """Wilder RSI seeded by the simple mean of the first ``window`` moves."""
    p = np.asarray(prices, dtype=np.float64)
    if len(p) <= window:
        raise TooShort(f"rsi needs more than {window} prices")
    d = np.diff(p)
    gains = np.maximum(d, 0.0)
    losses = np.maximum(-d, 0.0)
    out = np.full(len(p), np.nan)
    g = gains[:window].mean()
    l = losses[:window].mean()
    out[window] = _rsi_value(g, l)
    for i in range(window, len(d)):
        g = (g * (window - 1) + gains[i]) / window
        l = (l * (window - 1) + losses[i]) / window
        out[i + 1] = _rsi_value(g, l)
    return out


def _rsi_value(g: float, l: float) -> float:
    if l == 0.0:
        return 100.0 if g > 0.0 else 50.0
    return 100.0 - 100.0 / (1.0 + g / l)


def ema(x, span: int) -> np.ndarray:
    """Recursive EMA with smoothing 2/(span+1), seeded with the first value."""
    x = np.asarray(x, dtype=np.float64)
    a = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = v if i == 0 else a * v + (1.0 - a) * acc
        out[i] = acc
    return out


def macd(prices, fast: int = 12, slow: int = 26, signal: int = 9) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < fast < slow or signal < 1:
        raise BadSpans(f"need 0 < fast < slow and signal >= 1, got {(fast, slow, signal)}")
    p = np.asarray(prices, dtype=np.float64)
    if len(p) <= slow + signal:
        raise TooShort(f"macd needs more than {slow + signal} prices")
    line = ema(p, fast) - ema(p, slow)
    return line, ema(line, signal)


def feature_returns(series: OhlcvSeries, winsor: tuple[float, float] | None = (0.01, 0.99)) -> np.ndarray:
    """Date-aligned daily returns (NaN on the first date), optionally winsorized."""
    r = daily_returns(series)
    if winsor is not None:
        r = winsorize(r, *winsor)
    return np.concatenate([[np.nan], r])


def build_feature_frame(
    series: OhlcvSeries,
    lookbacks=DEFAULT_LOOKBACKS,
    alpha: float = 1.0,
    rsi_window: int = 14,
    macd_spans=DEFAULT_MACD_SPANS,
    winsor: tuple[float, float] | None = (0.01, 0.99),
) -> FeatureFrame:
    lookbacks = sorted(set(int(l) for l in lookbacks))
    n = len(series)
    if not lookbacks or n <= max(lookbacks) + 1:
        raise TooShort(f"{series.ticker}: {n} bars is too short for lookback {max(lookbacks, default=0)}")
    r = feature_returns(series, winsor)
    cols: dict[str, np.ndarray] = {}
    for l in lookbacks:
        cols[f"sma_{l}"] = rolling_sma(r, l)
    for l in lookbacks:
        cols[f"vol_{l}"] = rolling_vol(r, l)
    for l in lookbacks:
        cols[f"tstat_{l}"] = tstat_signal(r, l, alpha)
    cols[f"rsi_{rsi_window}"] = rsi(series.adj_close, rsi_window)
    line, sig = macd(series.adj_close, *macd_spans)
    cols["macd"] = line
    cols["macd_signal"] = sig
    defined = np.all(np.isfinite(np.column_stack(list(cols.values()))), axis=1)
    # all columns have a single warm-up prefix, so the first defined row starts the valid block
    valid_from = int(np.argmax(defined)) if defined.any() else n
    return FeatureFrame(series.ticker, series.dates.copy(), cols, valid_from)
