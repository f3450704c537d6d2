"""Convex quadratic surrogates for AC power flow, and the conic OPF built on them."""

__version__ = "0.1.0"
