"""Disintegrated PAC-Bayes certificates for classifiers trained by gradient flow."""

__version__ = "0.1.0"
