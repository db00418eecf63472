"""Simulation toolkit for the stochastic Keller-Segel system with common noise.

Modules: ``kernel`` (Bessel potential and mollified force tables), ``fields``
(coefficient fields, Wiener paths), ``particles`` (N-body Euler-Maruyama),
``spde`` (grid solver), ``coupling`` (particle/mean-field coupling) and
``harness`` (configuration, sweeps, reports, CLI).
"""

__version__ = "0.1.0"
