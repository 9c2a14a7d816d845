"""Numerical laboratory for heat kernels, Green functions, optimal transport
and Lagrangian flows on finite metric measure spaces."""

__version__ = "0.1.0"
