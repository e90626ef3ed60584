"""Multi-resolution air quality forecasting on CPU."""
__version__ = "0.1.0"
