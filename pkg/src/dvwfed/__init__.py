"""Federated learning simulator with distributed-validation performance weighting."""

__version__ = "0.1.0"
