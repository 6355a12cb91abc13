import csv

import numpy as np
import pytest

from trendcast.market_data import OhlcvSeries


def synthetic_series(ticker="SYN", n=600, seed=0, drift=0.0003, vol=0.015, start="2015-01-01"):
    """Geometric random walk with consistent OHLC bounds on consecutive calendar days."""
    rng = np.random.default_rng(seed)
    close = 100.0 * np.exp(np.cumsum(rng.normal(drift, vol, n)))
    open_ = close * (1 + rng.normal(0, 0.003, n))
    high = np.maximum(open_, close) * 1.01
    low = np.minimum(open_, close) * 0.99
    volume = rng.integers(100_000, 1_000_000, n).astype(float)
    dates = np.datetime64(start, "D") + np.arange(n)
    return OhlcvSeries(ticker, dates, open_, high, low, close, close.copy(), volume)


def write_csv(path, series: OhlcvSeries, rows=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "open", "high", "low", "close", "adj_close", "volume"])
        idx = range(len(series)) if rows is None else rows
        for i in idx:
            w.writerow([str(series.dates[i]), series.open[i], series.high[i], series.low[i],
                        series.close[i], series.adj_close[i], series.volume[i]])


def numeric_grad(f, params, h=1e-5):
    """Central differences of scalar f() over every entry of every array in ``params.arrays()``."""
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


@pytest.fixture
def series():
    return synthetic_series()


@pytest.fixture
def small_cfg():
    """Dataset settings sized for short synthetic series."""
    from trendcast.dataset import DatasetConfig
    return DatasetConfig(lookbacks=(20, 50), trend_lookback=20, window=20)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
