"""Confederated learning over silos separated by individual, data type and identity."""

__version__ = "0.1.0"
