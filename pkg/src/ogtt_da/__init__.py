"""Estimate insulin secretion capacity and insulin sensitivity from OGTTs."""

__version__ = "0.1.0"
