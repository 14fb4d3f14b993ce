"""Structured pruning testbed for small selective state-space language models."""

__version__ = "0.1.0"
