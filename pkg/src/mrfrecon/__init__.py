"""Compressive MR fingerprinting: simulation, dictionary matching, BLIP,
and an unrolled learned proximal-gradient reconstruction network."""

__version__ = "0.1.0"
