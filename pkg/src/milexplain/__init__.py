"""Explainable multiple-instance learning on reproducible toy benchmarks."""

__version__ = "0.1.0"
