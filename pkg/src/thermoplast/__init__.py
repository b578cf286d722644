"""Finite element thermo-viscoplasticity with discrete energy audits."""

__version__ = "0.1.0"
