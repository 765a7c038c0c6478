"""Numerical laboratory for large deviations of stochastic porous media equations."""

__version__ = "0.1.0"
