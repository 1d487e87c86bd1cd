"""Inter-series attention transformer for multi-series demand forecasting."""

__version__ = "0.1.0"
