"""flowlab: offline flow metering and leakage-safe traffic classification."""

__version__ = "0.1.0"
