"""Jump detection, clustering and power-law profiling for minute market data."""

__version__ = "0.1.0"
