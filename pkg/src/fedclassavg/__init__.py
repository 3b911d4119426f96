"""Personalized federated learning by classifier averaging over heterogeneous client models."""

__version__ = "0.1.0"
