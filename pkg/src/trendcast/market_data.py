"""OHLCV ingestion, cleaning, summary statistics and stationarity tests.

Cleaning follows a fixed order: OHLC bound repair, volume winsorization,
then calendar alignment with gap imputation. Daily returns used as model
features are winsorized later, in ``features``; price levels are never
clamped so that moving-average geometry and P&L stay continuous.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptyFile,
    EmptyInput,
    EmptyIntersection,
    MalformedRow,
    MissingColumn,
    NonMonotoneDates,
    SingularRegression,
    TooShort,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("date", "open", "high", "low", "close", "adj_close", "volume")
PRICE_FIELDS = ("open", "high", "low", "close", "adj_close")
LOG_COLUMNS = ("date", "ticker", "field", "action", "old", "new")

ADF_CRITICAL_5PCT = -2.86
KPSS_CRITICAL_5PCT = 0.463
MAX_FILL_GAP = 3


class OhlcvBar(NamedTuple):
    date: np.datetime64
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float


@dataclass(frozen=True)
class CleaningRecord:
    date: str
    ticker: str
    field: str
    action: str
    old: float | None = None
    new: float | None = None

    def as_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.date, self.ticker, self.field, self.action, fmt(self.old), fmt(self.new)]


@dataclass
class OhlcvSeries:
    """Column-oriented daily bars for one ticker, dates strictly ascending."""

    ticker: str
    dates: np.ndarray  # datetime64[D]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray
    cleaning_log: list[CleaningRecord] = field(default_factory=list)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        for name in PRICE_FIELDS + ("volume",):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.dates)
        for name in PRICE_FIELDS + ("volume",):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{self.ticker}: column {name} has wrong length")
        if n > 1 and not np.all(np.diff(self.dates).astype(np.int64) > 0):
            raise NonMonotoneDates(f"{self.ticker}: dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.dates)

    def bar(self, i: int) -> OhlcvBar:
        return OhlcvBar(self.dates[i], *(float(getattr(self, f)[i]) for f in PRICE_FIELDS + ("volume",)))

    def __iter__(self):
        return (self.bar(i) for i in range(len(self)))

    def take(self, index: np.ndarray) -> "OhlcvSeries":
        cols = {f: getattr(self, f)[index] for f in PRICE_FIELDS + ("volume",)}
        return OhlcvSeries(self.ticker, self.dates[index], cleaning_log=list(self.cleaning_log), **cols)

    def truncate(self, n: int) -> "OhlcvSeries":
        return self.take(np.arange(min(n, len(self))))


@dataclass(frozen=True)
class SummaryStats:
    ticker: str
    n: int
    mean_pct: float
    std_pct: float
    ac1: float
    skewness: float
    kurtosis_excess: float
    delta_ac1: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class StationarityResult:
    adf_stat: float
    adf_reject_5pct: bool
    kpss_stat: float
    kpss_reject_5pct: bool
    lags_used: int


@dataclass(frozen=True)
class AdfResult:
    stat: float
    reject_5pct: bool
    lags_used: int
    nobs: int


@dataclass(frozen=True)
class KpssResult:
    stat: float
    reject_5pct: bool
    bandwidth: int


# ---------------------------------------------------------------------------
# ingestion


def load_ohlcv(path: str | Path, ticker: str | None = None) -> OhlcvSeries:
    """Parse one CSV file with header ``date,open,high,low,close,adj_close,volume``.

    Rows may arrive in any order; they are sorted by date. Duplicate dates,
    missing columns and unparseable cells raise, naming the file and row.
    """
    path = Path(path)
    ticker = ticker or path.stem
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise EmptyFile(f"{path}: file is empty") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in CSV_COLUMNS]
        dates, values = [], []
        # row numbers are 1-based file lines, header is line 1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                cells = [row[i].strip() for i in idx]
                d = np.datetime64(cells[0], "D")
                nums = [float(c) for c in cells[1:]]
            except (IndexError, ValueError) as exc:
                raise MalformedRow(f"{path}: row {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in nums):
                raise MalformedRow(f"{path}: row {lineno}: non-finite value")
            if min(nums[:5]) <= 0 or nums[5] < 0:
                raise MalformedRow(f"{path}: row {lineno}: prices must be > 0 and volume >= 0")
            dates.append(d)
            values.append(nums)
    if not dates:
        raise EmptyFile(f"{path}: no data rows")
    dates_arr = np.array(dates, dtype="datetime64[D]")
    order = np.argsort(dates_arr, kind="stable")
    dates_arr = dates_arr[order]
    dup = np.nonzero(np.diff(dates_arr).astype(np.int64) == 0)[0]
    if len(dup):
        raise NonMonotoneDates(f"{path}: duplicated date {dates_arr[dup[0]]}")
    vals = np.array(values, dtype=np.float64)[order]
    return OhlcvSeries(ticker, dates_arr, *vals.T)


def write_ohlcv(series: OhlcvSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for b in series:
            w.writerow([str(b.date)] + [repr(float(v)) for v in b[1:]])


def write_cleaning_log(records: Iterable[CleaningRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow(r.as_row())


# ---------------------------------------------------------------------------
# cleaning


def daily_returns(series: OhlcvSeries | np.ndarray) -> np.ndarray:
    """Simple returns of adjusted close, length n-1."""
    p = series.adj_close if isinstance(series, OhlcvSeries) else np.asarray(series, dtype=np.float64)
    if len(p) < 2:
        raise TooShort("daily_returns needs at least 2 prices")
    return p[1:] / p[:-1] - 1.0


def winsorize(values, lower_q: float = 0.01, upper_q: float = 0.99) -> np.ndarray:
    """Clamp values to their empirical [lower_q, upper_q] quantiles.

    Bounds are order statistics (lower bound rounds the quantile position
    down, upper bound rounds it up), which makes the operation idempotent.
    NaNs are ignored when computing quantiles and passed through unchanged.
    """
    v = np.asarray(values, dtype=np.float64)
    if not 0.0 <= lower_q < upper_q <= 1.0:
        raise ValueError("need 0 <= lower_q < upper_q <= 1")
    finite = v[~np.isnan(v)]
    if finite.size == 0:
        raise EmptyInput("winsorize on empty input")
    lo = np.quantile(finite, lower_q, method="lower")
    hi = np.quantile(finite, upper_q, method="higher")
    return np.where(np.isnan(v), v, np.clip(v, lo, hi))


def repair_bounds(series: OhlcvSeries) -> OhlcvSeries:
    """Force low <= min(open, close) and high >= max(open, close)."""
    lo_need = np.minimum(series.open, series.close)
    hi_need = np.maximum(series.open, series.close)
    low = np.minimum(series.low, lo_need)
    high = np.maximum(series.high, hi_need)
    log = list(series.cleaning_log)
    for i in np.nonzero(low != series.low)[0]:
        log.append(CleaningRecord(str(series.dates[i]), series.ticker, "low", "repair", series.low[i], low[i]))
    for i in np.nonzero(high != series.high)[0]:
        log.append(CleaningRecord(str(series.dates[i]), series.ticker, "high", "repair", series.high[i], high[i]))
    return replace(series, low=low, high=high, cleaning_log=log)


def winsorize_volume(series: OhlcvSeries, lower_q: float = 0.01, upper_q: float = 0.99) -> OhlcvSeries:
    vol = winsorize(series.volume, lower_q, upper_q)
    log = list(series.cleaning_log)
    for i in np.nonzero(vol != series.volume)[0]:
        log.append(CleaningRecord(str(series.dates[i]), series.ticker, "volume", "winsorize", series.volume[i], vol[i]))
    return replace(series, volume=vol, cleaning_log=log)


def _missing_runs(present: np.ndarray) -> list[tuple[int, int]]:
    """(start, stop) index pairs of consecutive False entries."""
    runs = []
    i, n = 0, len(present)
    while i < n:
        if present[i]:
            i += 1
            continue
        j = i
        while j < n and not present[j]:
            j += 1
        runs.append((i, j))
        i = j
    return runs


def align_and_fill(universe: Sequence[OhlcvSeries]) -> list[OhlcvSeries]:
    """Put every ticker on one common calendar.

    The candidate calendar is the union of observed dates. For each ticker,
    a single missing interior day is linearly interpolated, runs of 2-3
    missing days are forward-filled, and longer runs (or leading runs with
    nothing to carry forward) drop those dates for every ticker.
    """
    if not universe:
        raise EmptyInput("align_and_fill needs at least one series")
    calendar = np.unique(np.concatenate([s.dates for s in universe]))
    n = len(calendar)
    drop = np.zeros(n, dtype=bool)
    drop_log: list[CleaningRecord] = []
    plans = []
    for s in universe:
        pos = np.searchsorted(calendar, s.dates)
        present = np.zeros(n, dtype=bool)
        present[pos] = True
        runs = _missing_runs(present)
        plans.append((pos, runs))
        for a, b in runs:
            k = b - a
            if a == 0 or k > MAX_FILL_GAP:
                drop[a:b] = True
                for i in range(a, b):
                    drop_log.append(CleaningRecord(str(calendar[i]), s.ticker, "*", "drop_date"))
    keep = ~drop
    if not keep.any():
        raise EmptyIntersection("no dates survive alignment across the universe")

    out = []
    for s, (pos, runs) in zip(universe, plans):
        log = list(s.cleaning_log)
        cols = {}
        for f in PRICE_FIELDS + ("volume",):
            full = np.full(n, np.nan)
            full[pos] = getattr(s, f)
            cols[f] = full
        for a, b in runs:
            if a == 0 or (b - a) > MAX_FILL_GAP:
                continue
            interior_single = (b - a) == 1 and b < n
            for f, full in cols.items():
                if interior_single:
                    full[a] = 0.5 * (full[a - 1] + full[b])
                else:
                    full[a:b] = full[a - 1]
            action = "interpolate" if interior_single else "ffill"
            for i in range(a, b):
                if keep[i]:
                    for f, full in cols.items():
                        log.append(CleaningRecord(str(calendar[i]), s.ticker, f, action, None, full[i]))
        log.extend(r for r in drop_log if r.ticker == s.ticker)
        out.append(OhlcvSeries(s.ticker, calendar[keep], cleaning_log=log,
                               **{f: v[keep] for f, v in cols.items()}))
    return out


def clean_universe(universe: Sequence[OhlcvSeries], lower_q: float = 0.01,
                   upper_q: float = 0.99) -> list[OhlcvSeries]:
    """Bound repair, volume winsorization and calendar alignment, in that order."""
    prepared = [winsorize_volume(repair_bounds(s), lower_q, upper_q) for s in universe]
    return align_and_fill(prepared)


# ---------------------------------------------------------------------------
# statistics


def _ac1(x: np.ndarray) -> float:
    d = x - x.mean()
    denom = np.dot(d, d)
    if denom == 0.0:
        return float("nan")
    return float(np.dot(d[1:], d[:-1]) / denom)


def summary_stats(series: OhlcvSeries, delta) -> SummaryStats:
    """Return moments in percent, lag-1 autocorrelations, and excess kurtosis.

    Undefined quantities (zero variance) come back as NaN and are listed in
    ``flags`` rather than raising.
    """
    r = daily_returns(series)
    if len(r) < 30:
        raise TooShort("summary_stats needs at least 30 returns")
    delta = np.asarray(delta, dtype=np.float64)
    delta = delta[np.isfinite(delta)]
    flags = []
    mean = r.mean()
    std = r.std(ddof=1)
    d = r - mean
    m2 = np.mean(d**2)
    if m2 == 0.0:
        skew = kurt = float("nan")
        flags += ["skewness", "kurtosis_excess"]
    else:
        skew = float(np.mean(d**3) / m2**1.5)
        kurt = float(np.mean(d**4) / m2**2 - 3.0)
    ac1 = _ac1(r)
    if math.isnan(ac1):
        flags.append("ac1")
    dac1 = _ac1(delta) if len(delta) > 2 else float("nan")
    if math.isnan(dac1):
        flags.append("delta_ac1")
    return SummaryStats(series.ticker, len(r), float(100 * mean), float(100 * std), ac1,
                        skew, kurt, dac1, tuple(flags))


def adf_test(values) -> AdfResult:
    """Augmented Dickey-Fuller with constant, fixed lag order floor(12 (n/100)^0.25)."""
    y = np.asarray(values, dtype=np.float64)
    n = len(y)
    if n < 50:
        raise TooShort("adf_test needs n >= 50")
    p = int(math.floor(12.0 * (n / 100.0) ** 0.25))
    dy = np.diff(y)
    resp = dy[p:]
    m = len(resp)
    cols = [np.ones(m), y[p:-1]]
    cols += [dy[p - i: len(dy) - i] for i in range(1, p + 1)]
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularRegression("ADF design matrix is rank deficient")
    beta, *_ = np.linalg.lstsq(X, resp, rcond=None)
    resid = resp - X @ beta
    dof = m - X.shape[1]
    s2 = resid @ resid / dof
    xtx_inv = np.linalg.inv(X.T @ X)
    se = math.sqrt(s2 * xtx_inv[1, 1])
    if se == 0.0:
        raise SingularRegression("ADF residual variance is zero")
    stat = float(beta[1] / se)
    return AdfResult(stat, stat < ADF_CRITICAL_5PCT, p, m)


def kpss_test(values) -> KpssResult:
    """Level-stationarity KPSS with Bartlett long-run variance."""
    y = np.asarray(values, dtype=np.float64)
    n = len(y)
    if n < 50:
        raise TooShort("kpss_test needs n >= 50")
    bw = int(math.floor(4.0 * (n / 100.0) ** 0.25))
    e = y - y.mean()
    lrv = e @ e
    for k in range(1, bw + 1):
        lrv += 2.0 * (1.0 - k / (bw + 1.0)) * (e[k:] @ e[:-k])
    lrv /= n
    s = np.cumsum(e)
    stat = 0.0 if lrv <= 0.0 else float(s @ s / (n * n * lrv))
    return KpssResult(stat, stat > KPSS_CRITICAL_5PCT, bw)


def stationarity(values) -> StationarityResult:
    a = adf_test(values)
    k = kpss_test(values)
    return StationarityResult(a.stat, a.reject_5pct, k.stat, k.reject_5pct, a.lags_used)
