"""Simulation and key-rate analysis for mediated semi-quantum key distribution."""

__version__ = "0.1.0"
