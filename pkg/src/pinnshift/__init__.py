"""PINN extrapolation analysis: training, reference solutions and spectral-shift metrics."""

__version__ = "0.1.0"
