"""Federated second-order optimization with preconditioner alignment and correction."""

__version__ = "0.1.0"
