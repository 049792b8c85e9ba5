"""Simulation and compilation toolkit for donor-dot charge-qudit registers."""

__version__ = "0.1.0"
