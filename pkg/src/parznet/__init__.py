"""Variational Parzen-filter waveform networks in numpy."""

__version__ = "0.1.0"
