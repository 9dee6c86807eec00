"""Detection-gated UAV streaming pipeline and its scenario harness."""

__version__ = "0.1.0"
