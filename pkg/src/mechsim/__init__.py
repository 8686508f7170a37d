"""Distributed VCG mechanisms with gradient-consistency penalties."""

__version__ = "0.1.0"
