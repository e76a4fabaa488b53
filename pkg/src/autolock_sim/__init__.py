"""Inclusive cache hierarchy simulator with automatic inclusion lockdown."""

__version__ = "0.1.0"
