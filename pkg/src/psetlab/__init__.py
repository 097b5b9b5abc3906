"""Ensemble learning experiments for permutation-invariant point-set classifiers."""

__version__ = "0.1.0"
