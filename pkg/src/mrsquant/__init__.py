"""Synthetic MRS signal generation, amplitude quantification and benchmarking."""

__version__ = "0.1.0"
