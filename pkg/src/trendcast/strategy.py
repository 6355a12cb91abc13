"""Baseline trend-following: price-vs-SMA signal, capped positions, cost-adjusted P&L."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LengthMismatch, TooShort
from .features import rolling_sma
from .market_data import OhlcvSeries

DEFAULT_COST_BPS = 2.0
# relative scale below which a rolling std is treated as exactly zero
ZERO_STD_RTOL = 1e-12


@dataclass
class SignalSeries:
    dates: np.ndarray | None
    raw: np.ndarray
    normalized: np.ndarray
    lookback: int


@dataclass
class PositionSeries:
    dates: np.ndarray | None
    weights: np.ndarray


@dataclass
class PnlSeries:
    dates: np.ndarray | None
    weights: np.ndarray
    daily: np.ndarray
    cost_bps: float
    prev_weight: float = 0.0

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.daily)

    @property
    def total(self) -> float:
        return float(self.daily.sum())

    def to_csv(self, path: str | Path) -> None:
        cum = self.cumulative
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "weight", "daily_pnl", "cum_pnl"])
            for i in range(len(self.daily)):
                d = str(self.dates[i]) if self.dates is not None else str(i)
                w.writerow([d, repr(float(self.weights[i])), repr(float(self.daily[i])), repr(float(cum[i]))])


def rolling_standardize_trailing(x: np.ndarray, window: int) -> np.ndarray:
    """(x_t - mean) / std over x[t-window+1..t]; 0 where the std vanishes."""
    out = np.full(len(x), np.nan)
    if len(x) < window:
        return out
    w = sliding_window_view(x, window)
    mu = w.mean(axis=1)
    sd = w.std(axis=1, ddof=1)
    cur = x[window - 1:]
    zero = sd <= ZERO_STD_RTOL * np.maximum(1.0, np.abs(mu))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(zero, 0.0, (cur - mu) / sd)
    z[np.isnan(mu)] = np.nan
    out[window - 1:] = z
    return out


def trend_signal(prices, lookback: int, dates=None) -> SignalSeries:
    """S_t = (P_t - SMA)/SMA, then standardized by its own trailing mean and std.

    The SMA uses the strictly past prices t-l..t-1. The normalized signal is
    first defined at index 2l-1.
    """
    p = np.asarray(prices, dtype=np.float64)
    if len(p) < 2 * lookback:
        raise TooShort(f"trend_signal needs {2 * lookback} prices, got {len(p)}")
    sma = rolling_sma(p, lookback)
    raw = (p - sma) / sma
    norm = rolling_standardize_trailing(raw, lookback)
    return SignalSeries(dates, raw, norm, lookback)


def positions_from_signal(signal: SignalSeries) -> PositionSeries:
    s = signal.normalized
    w = np.where(np.isfinite(s), np.clip(s, -1.0, 1.0), 0.0)
    return PositionSeries(signal.dates, w)


def pnl(weights, returns, b_bps: float = DEFAULT_COST_BPS, prev_weight: float = 0.0,
        dates=None) -> PnlSeries:
    """daily_t = w_{t-1} r_t - b |w_t - w_{t-1}|, additive (not compounded).

    ``prev_weight`` is the position held going into the first day; 0 for a fresh book.
    """
    if isinstance(weights, PositionSeries):
        dates = weights.dates if dates is None else dates
        weights = weights.weights
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    if w.shape != r.shape:
        raise LengthMismatch(f"weights {w.shape} vs returns {r.shape}")
    if b_bps < 0:
        raise ValueError("cost must be non-negative")
    w_lag = np.concatenate([[prev_weight], w[:-1]])
    daily = w_lag * r - (b_bps / 1e4) * np.abs(w - w_lag)
    return PnlSeries(dates, w, daily, b_bps, prev_weight)


def aligned_returns(prices) -> np.ndarray:
    """r_t = P_t/P_{t-1} - 1 on the price index, with r_0 = 0."""
    p = np.asarray(prices, dtype=np.float64)
    return np.concatenate([[0.0], p[1:] / p[:-1] - 1.0])


def backtest_baseline(series: OhlcvSeries, lookback: int = 100, b_bps: float = DEFAULT_COST_BPS) -> PnlSeries:
    sig = trend_signal(series.adj_close, lookback, series.dates)
    pos = positions_from_signal(sig)
    return pnl(pos, aligned_returns(series.adj_close), b_bps)
