"""Monotonic latent-variable attention models for sequence transduction."""

__version__ = "0.1.0"
