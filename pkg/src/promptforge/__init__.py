"""Reinforcement-learned prompt optimization against frozen worker models."""

__version__ = "0.1.0"
