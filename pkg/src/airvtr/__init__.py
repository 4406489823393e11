"""Aerial visual teach-and-return simulator and navigation stack."""

__version__ = "0.1.0"
