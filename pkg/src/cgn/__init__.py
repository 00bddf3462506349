"""Counterfactual generation guided by bilateral asymmetry."""

__version__ = "0.1.0"
