"""Backward-reachable-set guided neural tracking control with conformal
certification for disturbed discrete-time nonlinear systems."""

__version__ = "0.1.0"
