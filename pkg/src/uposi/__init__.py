"""Universal policies conditioned on model parameters, with online system identification."""

__version__ = "0.1.0"
