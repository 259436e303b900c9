"""Frequency-split dual-branch anomaly detection on patch embeddings."""

__version__ = "0.1.0"
