"""Attribute prototype network for zero-, few- and any-shot classification
on a numpy autodiff engine."""

__version__ = "0.1.0"
