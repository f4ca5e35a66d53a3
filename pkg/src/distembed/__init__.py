"""Distributed owner-computes graph embeddings on a simulated message-passing world."""

__version__ = "0.1.0"
