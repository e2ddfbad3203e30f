"""Online particle smoothing with unbiased, possibly signed, transition-density estimates."""

from pmsmooth.core import (
    AdditiveFunctional,
    DensityDraw,
    ParticleCloud,
    SsmDefinition,
    derive_rng,
    ess,
    multinomial_indices,
    normalize_weights,
    weighted_mean,
)
from pmsmooth.smoother import Method, SmootherConfig, path_space_smoother, smooth_online

__version__ = "0.1.0"

__all__ = [
    "AdditiveFunctional",
    "DensityDraw",
    "Method",
    "ParticleCloud",
    "SmootherConfig",
    "SsmDefinition",
    "derive_rng",
    "ess",
    "multinomial_indices",
    "normalize_weights",
    "path_space_smoother",
    "smooth_online",
    "weighted_mean",
]
