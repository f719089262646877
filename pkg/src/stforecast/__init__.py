"""Dynamic spatio-temporal traffic-volume forecasting on gridded trip counts."""

__version__ = "0.1.0"
