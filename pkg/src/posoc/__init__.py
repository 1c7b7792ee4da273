"""Partially observed stochastic optimal control: particle fixed-point
training, LQG separation benchmarks, and finite-state verification oracles."""

__version__ = "0.1.0"
