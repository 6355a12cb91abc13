import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trendcast import strategy as sg
from trendcast.errors import LengthMismatch, TooShort

from conftest import synthetic_series

weights_st = st.lists(st.floats(-1, 1), min_size=2, max_size=60)


def two_pass_trend(p, l):
    """Loop oracle: S from the strictly-past SMA, then trailing standardization including t."""
    n = len(p)
    S = np.full(n, np.nan)
    for t in range(l, n):
        m = sum(p[t - l:t]) / l
        S[t] = (p[t] - m) / m
    out = np.full(n, np.nan)
    for t in range(2 * l - 1, n):
        w = S[t - l + 1:t + 1]
        mu = w.mean()
        sd = np.sqrt(((w - mu) ** 2).sum() / (l - 1))
        out[t] = 0.0 if sd == 0 else (S[t] - mu) / sd
    return S, out


def test_trend_constant_prices():
    sig = sg.trend_signal(np.full(50, 10.0), 10)
    np.testing.assert_array_equal(sig.raw[10:], 0)
    np.testing.assert_array_equal(sig.normalized[19:], 0)
    assert np.isnan(sig.normalized[:19]).all()


def test_trend_exponential_growth():
    p = 100 * 1.001 ** np.arange(400)
    sig = sg.trend_signal(p, 50)
    # closed form: S = 1 / mean(g^-i, i=1..l) - 1
    g = 1.001
    expected = 1 / np.mean(g ** -np.arange(1, 51)) - 1
    assert sig.raw[-1] == pytest.approx(expected, rel=1e-9) and expected > 0
    assert sig.normalized[-1] == 0


def test_trend_two_pass_oracle():
    p = synthetic_series(n=300, seed=4).adj_close
    S, norm = two_pass_trend(list(p), 30)
    sig = sg.trend_signal(p, 30)
    np.testing.assert_allclose(sig.raw, S, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(sig.normalized, norm, atol=1e-12, equal_nan=True)


def test_trend_too_short():
    with pytest.raises(TooShort):
        sg.trend_signal(np.ones(19), 10)


def test_positions_clamp():
    sig = sg.SignalSeries(None, np.zeros(4), np.array([np.nan, 0.5, 3.2, -7.0]), 2)
    np.testing.assert_array_equal(sg.positions_from_signal(sig).weights, [0, 0.5, 1, -1])


def test_pnl_examples():
    np.testing.assert_array_equal(sg.pnl(np.zeros(5), np.full(5, 0.01)).daily, 0)
    r = np.array([0.0, 0.01, -0.02, 0.005])
    p = sg.pnl(np.ones(4), r, b_bps=2)
    assert p.total == pytest.approx(r[1:].sum() - 2e-4)
    # hand arithmetic: day0 flat, day1 buys one unit, day2 earns -0.03 on it and flips to -1
    p = sg.pnl(np.array([0.0, 1.0, -1.0]), np.array([0.01, 0.02, -0.03]), b_bps=2)
    np.testing.assert_allclose(p.daily, [0.0, -0.0002, -0.0304], atol=1e-15)
    np.testing.assert_allclose(p.cumulative, np.cumsum(p.daily))


def test_pnl_errors():
    with pytest.raises(LengthMismatch):
        sg.pnl(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        sg.pnl(np.zeros(3), np.zeros(3), b_bps=-1)


def test_pnl_csv(tmp_path):
    sg.pnl(np.array([0.0, 1.0]), np.array([0.0, 0.01])).to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "date,weight,daily_pnl,cum_pnl"


def test_baseline_zero_volatility():
    s = synthetic_series(n=300)
    s.adj_close[:] = 50.0
    assert sg.backtest_baseline(s, 50).total == 0


def test_baseline_cost_identity():
    s = synthetic_series(n=400, seed=9)
    a = sg.backtest_baseline(s, 50, 0.0)
    b = sg.backtest_baseline(s, 50, 2.0)
    turnover = np.abs(np.diff(np.concatenate([[0.0], a.weights]))).sum()
    assert a.total - b.total == pytest.approx(2e-4 * turnover, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(weights_st, st.floats(0, 50), st.floats(0, 50))
def test_pnl_cost_monotone(w, b1, b2):
    w = np.array(w)
    r = np.linspace(-0.02, 0.02, len(w))
    lo, hi = sorted((b1, b2))
    assert np.all(sg.pnl(w, r, hi).daily <= sg.pnl(w, r, lo).daily + 1e-15)


@settings(max_examples=50, deadline=None)
@given(weights_st, st.integers(0, 58), st.integers(0, 2**31))
def test_pnl_execution_lag(w, horizon, seed):
    w = np.array(w)
    horizon = min(horizon, len(w) - 1)
    rng = np.random.default_rng(seed)
    r = rng.normal(0, 0.01, len(w))
    r2 = r.copy()
    r2[horizon + 1:] = rng.permutation(r2[horizon + 1:])
    np.testing.assert_array_equal(sg.pnl(w, r).daily[:horizon + 1], sg.pnl(w, r2).daily[:horizon + 1])


@settings(max_examples=50, deadline=None)
@given(weights_st, st.integers(1, 59))
def test_pnl_additivity(w, cut):
    w = np.array(w)
    cut = min(cut, len(w) - 1)
    r = np.sin(np.arange(len(w))) * 0.01
    whole = sg.pnl(w, r).total
    first = sg.pnl(w[:cut], r[:cut]).total
    second = sg.pnl(w[cut:], r[cut:], prev_weight=w[cut - 1]).total
    assert whole == pytest.approx(first + second, abs=1e-12)
