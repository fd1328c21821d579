"""Implicit GIMP material point method with differentiable topology optimization."""
__version__ = "0.1.0"
