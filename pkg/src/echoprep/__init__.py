"""Robust many-body state preparation with adiabatic echo protocols."""

__version__ = "0.1.0"
