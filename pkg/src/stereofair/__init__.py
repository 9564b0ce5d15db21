"""Stereotype-aware fairness auditing and Mixture-of-Stereotypes mitigation."""

__version__ = "0.1.0"
