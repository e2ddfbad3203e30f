"""Small multivariate-normal helpers shared by the model definitions."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from pmsmooth.errors import ConfigError, SingularCovariance

_LOG_2PI = np.log(2.0 * np.pi)


def cholesky(cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc


def require_pd(cov, name: str) -> None:
    """Raise :class:`ConfigError` unless ``cov`` is positive definite."""
    try:
        cholesky(cov)
    except SingularCovariance as exc:
        raise ConfigError(f"{name} must be positive definite") from exc


def mvn_logpdf(z, mean, chol) -> np.ndarray:
    """Rows of ``z`` under ``N(mean, L L^T)`` with a fixed Cholesky factor ``L``."""
    z = np.atleast_2d(z)
    if chol.shape[0] == 1:
        r = (z - mean) / chol[0, 0]
    else:
        r = solve_triangular(chol, (z - mean).T, lower=True).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (chol.shape[0] * _LOG_2PI + logdet + np.sum(r * r, axis=1))


def mvn_sample(mean, chol, rng, n=None) -> np.ndarray:
    mean = np.atleast_2d(mean)
    n = mean.shape[0] if n is None else n
    return mean + rng.standard_normal((n, chol.shape[0])) @ chol.T
