"""Auxiliary-task adaptation of a shared graph encoder.

Gradient-surgery combiners (GradSim, GradScale, PCGrad, RCGrad) and
bi-level task weighting (BLO, BLORC) on top of a small tape-based
autodiff engine and synthetic graph tasks.
"""

__version__ = "0.1.0"
