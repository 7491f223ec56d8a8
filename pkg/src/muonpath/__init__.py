"""Toy barrel muon spectrometer: simulation and standalone track reconstruction."""

__version__ = "0.1.0"
