"""Language-driven retrieval of time-series segments."""

__version__ = "0.1.0"
