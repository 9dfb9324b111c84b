"""Dependent-prior approximation with a hierarchical VAE, plus centralized
and federated variational inference over the approximate models."""

__version__ = "0.1.0"
