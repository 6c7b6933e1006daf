"""Federated clustered linear bandits for heterogeneous clients."""

__version__ = "0.1.0"
