"""Demand-driven navigation in grid worlds with a dual-process agent."""

__version__ = "0.1.0"
