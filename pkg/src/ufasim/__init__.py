"""Deterministic discrete-event simulator of a two-region failover architecture."""

__version__ = "0.1.0"
