"""Learned JPEG steganographic costs: coefficient model, distortion, networks and training."""

__version__ = "0.1.0"
