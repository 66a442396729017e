"""Tick-level limit-order-book forecasting and trading-simulation toolkit."""

__version__ = "0.1.0"
