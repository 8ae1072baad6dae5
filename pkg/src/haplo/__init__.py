"""Desk-scale early-fusion single-transformer vision-language model with two-stage training."""

__version__ = "0.1.0"
