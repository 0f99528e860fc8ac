"""Constrained Bayesian filtering for SDE-driven state-space models.

Barrier-guided transition kernels, bootstrap/auxiliary particle filters,
ensemble Kalman filters and the Lorenz 96 experiment harness.
"""

__version__ = "0.1.0"
