"""Simulated speckle tactile sensing: a phase-screen encoder, sweep datasets,
a numpy CNN decoder and the experiments around them."""

__version__ = "0.1.0"
