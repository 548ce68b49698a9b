"""Two-phase PINN parameter estimation for the lithium-ion single particle model."""

__version__ = "0.1.0"
