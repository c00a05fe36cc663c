"""Lane-wise highway traffic anomaly detection."""

__version__ = "0.1.0"
