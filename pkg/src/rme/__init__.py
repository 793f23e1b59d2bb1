"""Rapid mismatch estimation: payload detection and identification for torque-controlled arms."""

__version__ = "0.1.0"
