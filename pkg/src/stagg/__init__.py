"""Spatio-temporal aggregation of frame-level local features for video classification."""
__version__ = "0.1.0"
