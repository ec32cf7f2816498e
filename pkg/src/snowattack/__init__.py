"""Adversarial snow: differentiable snowfall rendering and attacks on optical flow."""

__version__ = "0.1.0"
