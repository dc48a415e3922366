"""Pseudospectral lab for the stochastic anisotropic Swift-Hohenberg equation
and its stochastic Ginzburg-Landau amplitude approximation."""

__version__ = "0.1.0"
