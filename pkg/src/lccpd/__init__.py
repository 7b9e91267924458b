"""Bayesian change point detection for land-cover time series with missing data."""

__version__ = "0.1.0"

from .gaussian import (
    DegenerateCovarianceError,
    GaussianSpec,
    SpectroTemporalSample,
    conditional_moments,
    s_and_loglik,
    s_statistic,
)
from .model import (
    ChangeConfig,
    ClassLibrary,
    Hyperparams,
    PixelSeries,
    enumerate_configs,
    log_prior_vector,
)
from .em import FitResult, fit_region
from .metrics import accuracy, concordance, summarize_batch

__all__ = [
    "ChangeConfig",
    "ClassLibrary",
    "DegenerateCovarianceError",
    "FitResult",
    "GaussianSpec",
    "Hyperparams",
    "PixelSeries",
    "SpectroTemporalSample",
    "accuracy",
    "concordance",
    "conditional_moments",
    "enumerate_configs",
    "fit_region",
    "log_prior_vector",
    "s_and_loglik",
    "s_statistic",
    "summarize_batch",
]
