"""Graph attention networks with set-encoded edge features for single-cell data."""

__version__ = "0.1.0"
