"""Dual-encoder, dual-Q-Former medical captioning at toy scale."""

__version__ = "0.1.0"
