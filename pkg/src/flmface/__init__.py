"""Geometry-based adversarial attacks on landmark-parameterized face classifiers."""

__version__ = "0.1.0"
