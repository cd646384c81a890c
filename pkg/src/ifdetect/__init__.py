"""Influence-function label-error detection."""

__version__ = "0.1.0"
