"""Masked vision-language pretraining with semantic soft targets and a spectral loss."""

__version__ = "0.1.0"
