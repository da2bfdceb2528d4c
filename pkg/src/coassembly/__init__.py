"""Proactive human-robot co-assembly simulator."""

__version__ = "0.1.0"
