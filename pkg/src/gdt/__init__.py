"""Offline RL engine built on causal token graphs and relation-aware attention."""

__version__ = "0.1.0"
