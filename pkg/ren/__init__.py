"""Relevance encoding networks: VAEs that learn which latent dimensions the data supports."""

__version__ = "0.1.0"
