"""Trend-difference forecasting and cost-adjusted trend-following backtests."""

__version__ = "0.1.0"
