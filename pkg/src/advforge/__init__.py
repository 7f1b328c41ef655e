"""Minimal-perturbation adversarial examples on a small model zoo."""

__version__ = "0.1.0"
