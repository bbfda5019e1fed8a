"""Weighted chance-constrained DC optimal power flow."""

__version__ = "0.1.0"

__all__ = ["netmodel", "gaussmath", "policy", "chance", "solver", "montecarlo", "cli"]
