"""Geometry induced by Gaussian ensembles of sections, and Monte Carlo checks of
the Gauss-Bonnet-Chern identity for their zero loci."""

__version__ = "0.1.0"
