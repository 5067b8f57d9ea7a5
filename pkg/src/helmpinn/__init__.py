"""PINN forward solver for the damped Helmholtz equation in box rooms."""

__version__ = "0.1.0"
