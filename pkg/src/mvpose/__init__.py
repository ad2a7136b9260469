"""Multi-view spatial-temporal transformer for 2D pose sequences."""

__version__ = "0.1.0"
