"""Ensemble Kalman filtering and inversion from the Lagrangian-dual viewpoint."""

from .core import (Ensemble, ForwardMapError, ForwardOperator, GaussianMeasure, LinearOperator,
                   NoiseModel, NonlinearOperator, Observation, ensemble_forward_stats,
                   sample_covariance, sample_mean)

__version__ = "0.1.0"

__all__ = [
    "Ensemble", "ForwardMapError", "ForwardOperator", "GaussianMeasure", "LinearOperator",
    "NoiseModel", "NonlinearOperator", "Observation", "ensemble_forward_stats",
    "sample_covariance", "sample_mean",
]
