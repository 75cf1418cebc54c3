"""Parallel tree-based speculative decoding on deterministic toy models."""

__version__ = "0.1.0"
