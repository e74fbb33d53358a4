"""Deterministic two-path transport simulator with reservation-based scheduling."""

__version__ = "0.1.0"
