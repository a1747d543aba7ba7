"""Variational transdimensional inference with CoSMIC flows."""

__version__ = "0.1.0"
