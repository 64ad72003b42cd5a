"""Monocular depth as log-space bin classification with a dilated, multi-scale fusion network."""

__version__ = "0.1.0"
