"""Identifiable VAEs, exact-inference oracles and posterior-collapse diagnostics."""

__version__ = "0.1.0"
