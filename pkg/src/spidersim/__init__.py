"""Simulation and verification toolkit for spider diffusions on star-shaped
networks whose drift, diffusion and edge-selection weights depend on the
junction local time."""

__version__ = "0.1.0"
