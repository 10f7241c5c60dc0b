"""Numerical continuity-method solver for Fu-Yau Hessian equations on flat
complex tori, with a verification harness for the identities and scale
estimates the method rests on."""

__version__ = "0.1.0"
