"""Compressive mmWave channel estimation, path-order classification and localization."""

__version__ = "0.1.0"
