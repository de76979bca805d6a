"""Recursive variational autoencoder for binary vessel trees."""

__version__ = "0.1.0"
