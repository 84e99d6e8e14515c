"""Latent reasoning with patch-feature alignment, at desk scale."""

__version__ = "0.1.0"
