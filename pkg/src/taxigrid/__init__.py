"""Grid-based taxi traffic simulation and one-hour speed forecasting."""

__version__ = "0.1.0"
