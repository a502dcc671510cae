"""Quasi-stationary first-order mean field games on the torus via weak-KAM barriers."""
__version__ = "0.1.0"
