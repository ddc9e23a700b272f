"""Quantization-based nearest neighbor search with a recall/cost self-tuner."""

__version__ = "0.1.0"
