"""Characteristics-based laboratory for Vlasov-Poisson scattering objects."""

__version__ = "0.1.0"
