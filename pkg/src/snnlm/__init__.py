"""Spiking state-space language model with per-token adaptive computation."""

__version__ = "0.1.0"
