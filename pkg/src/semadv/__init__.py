"""Semantic adversarial attacks through small diffusion models, on numpy."""

__version__ = "0.1.0"
