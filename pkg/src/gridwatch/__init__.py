"""Hierarchical anomaly detection for distribution-grid phasor streams."""

__version__ = "0.1.0"
