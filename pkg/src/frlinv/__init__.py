"""Gradient inversion attacks on federated Q-learning at desk scale."""

__version__ = "0.1.0"
