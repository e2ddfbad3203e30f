"""Stochastic Lotka-Volterra predator-prey model with log-normal abundance indices.

``dX = alpha(X) dt + diag(X) Gamma dW`` with

    alpha_1(x) = x_1 (a10 - a11 x_1 - a12 x_2)
    alpha_2(x) = x_2 (-a20 + a21 x_1 - a22 x_2)

observed as ``Y_i = c_i X_i exp(eps_i)`` with ``eps ~ N(-diag(Sigma)/2, Sigma)``.
The drift is not a gradient, so the transition density is estimated with the
signed parametrix estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pmsmooth.core import DensityDraw, SsmDefinition
from pmsmooth.errors import ConfigError, PositivityViolation
from pmsmooth.estimators import ParametrixConfig, parametrix_transition_estimate
from pmsmooth.models.gaussian import cholesky, mvn_logpdf, mvn_sample, require_pd

POSITIVITY_FLOOR = 1e-6


def _mat(v):
    return np.atleast_2d(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class LotkaVolterraSpec:
    a10: float = 2.0
    a11: float = 0.2
    a12: float = 1.0
    a20: float = 2.0
    a21: float = 1.0
    a22: float = 0.2
    gamma: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(2))
    c: np.ndarray = field(default_factory=lambda: np.ones(2))
    obs_cov: np.ndarray = field(default_factory=lambda: 0.05 * np.eye(2))
    delta: float = 0.01
    x0: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    x0_log_sd: float = 0.1
    intensity: float = 1.0
    euler_step: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "gamma", _mat(self.gamma))
        object.__setattr__(self, "obs_cov", _mat(self.obs_cov))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(2))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(2))
        if min(self.a10, self.a11, self.a12, self.a20, self.a21, self.a22) < 0:
            raise ConfigError("Lotka-Volterra rates must be nonnegative")
        if np.any(self.c <= 0) or np.any(self.x0 <= 0):
            raise ConfigError("c and x0 must be positive")
        if self.gamma.shape != (2, 2) or self.obs_cov.shape != (2, 2):
            raise ConfigError("gamma and obs_cov must be 2x2")
        if not (self.delta > 0 and self.euler_step > 0 and self.x0_log_sd > 0):
            raise ConfigError("delta, euler_step and x0_log_sd must be positive")
        require_pd(self.gamma @ self.gamma.T, "gamma gamma^T")
        require_pd(self.obs_cov, "obs_cov")

    @property
    def gram(self) -> np.ndarray:
        """``G = Gamma Gamma^T``, so that ``sigma sigma^T = diag(x) G diag(x)``."""
        return self.gamma @ self.gamma.T


def lv_drift(spec: LotkaVolterraSpec, x) -> np.ndarray:
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    return np.stack(
        [
            x1 * (spec.a10 - spec.a11 * x1 - spec.a12 * x2),
            x2 * (-spec.a20 + spec.a21 * x1 - spec.a22 * x2),
        ],
        axis=1,
    )


def lv_parametrix_config(spec: LotkaVolterraSpec) -> ParametrixConfig:
    G = spec.gram

    def divergence(theta, x):
        x1, x2 = x[:, 0], x[:, 1]
        return (spec.a10 - 2 * spec.a11 * x1 - spec.a12 * x2) + (
            -spec.a20 + spec.a21 * x1 - 2 * spec.a22 * x2
        )

    def diffusion(theta, x):
        return x[:, :, None] * spec.gamma[None]

    # gamma_il = x_i x_l G_il
    def gamma_div(theta, x):
        return x * (G.sum(axis=0) + np.diag(G))[None]

    def gamma_second(theta, x):
        return np.full(x.shape[0], G.sum() + np.trace(G))

    return ParametrixConfig(
        drift=lambda theta, x: lv_drift(spec, x),
        drift_divergence=divergence,
        diffusion=diffusion,
        horizon=spec.delta,
        gamma_divergence=gamma_div,
        gamma_second=gamma_second,
        intensity=spec.intensity,
    )


def lv_obs_logpdf(spec: LotkaVolterraSpec, x, y) -> np.ndarray:
    """Log density of the abundance index ``y`` given abundances ``x``."""
    x = np.atleast_2d(x)
    y = np.asarray(y, dtype=float).reshape(1, 2)
    if np.any(y <= 0):
        raise ConfigError("abundance indices must be positive")
    mean = np.log(spec.c)[None] + np.log(x) - 0.5 * np.diag(spec.obs_cov)[None]
    return mvn_logpdf(np.log(y), mean, cholesky(spec.obs_cov)) - np.sum(np.log(y))


def _log_proposal(spec: LotkaVolterraSpec, x, y):
    """Mean and covariance of the log-space Gaussian proposal.

    Combines the Euler step of ``log X`` (via Ito's formula) with the Gaussian
    likelihood of ``log y``.
    """
    G = spec.gram
    log_drift = (
        np.stack(
            [
                spec.a10 - spec.a11 * x[:, 0] - spec.a12 * x[:, 1],
                -spec.a20 + spec.a21 * x[:, 0] - spec.a22 * x[:, 1],
            ],
            axis=1,
        )
        - 0.5 * np.diag(G)[None]
    )
    prior_mean = np.log(x) + spec.delta * log_drift
    prior_prec = np.linalg.inv(spec.delta * G)
    obs_prec = np.linalg.inv(spec.obs_cov)
    z = np.log(np.asarray(y, dtype=float).reshape(2)) - np.log(spec.c) + 0.5 * np.diag(spec.obs_cov)
    cov = np.linalg.inv(prior_prec + obs_prec)
    mean = (prior_mean @ prior_prec.T + (obs_prec @ z)[None]) @ cov.T
    return mean, cov


def lotka_volterra_model(spec: LotkaVolterraSpec) -> SsmDefinition:
    """Particle model with the parametrix estimator (signed) and a log-space proposal."""
    pcfg = lv_parametrix_config(spec)
    l0 = np.log(spec.x0)
    s0 = spec.x0_log_sd

    def prop_sample(k, x, y, rng):
        mean, cov = _log_proposal(spec, x, y)
        return np.exp(mvn_sample(mean, cholesky(cov), rng))

    def prop_density(k, x, xn, y):
        mean, cov = _log_proposal(spec, x, y)
        lxn = np.log(xn)
        return np.exp(mvn_logpdf(lxn, mean, cholesky(cov)) - lxn.sum(axis=1))

    return SsmDefinition(
        state_dim=2,
        obs_dim=2,
        param_dim=1,
        initial_sampler=lambda n, rng: np.exp(l0[None] + s0 * rng.standard_normal((n, 2))),
        initial_density_ratio=lambda x: np.ones(x.shape[0]),
        proposal_sampler=prop_sample,
        proposal_density=prop_density,
        obs_density=lambda k, x, y: np.exp(lv_obs_logpdf(spec, x, y)),
        transition_estimator=lambda k, x, xn, rng: DensityDraw(
            parametrix_transition_estimate(pcfg, None, x, xn, rng)
        ),
        transition_estimator_is_positive=False,
        name="lotka_volterra",
    )


def simulate_lv(spec: LotkaVolterraSpec, n: int, rng):
    """Simulate ``(times, X_{0:n}, Y_{0:n})`` with a fine Euler scheme.

    Raises:
        PositivityViolation: an abundance falls below the positivity floor.
    """
    n_sub = max(1, int(round(spec.delta / spec.euler_step)))
    h = spec.delta / n_sub
    x = np.zeros((n + 1, 2))
    x[0] = np.exp(np.log(spec.x0) + spec.x0_log_sd * rng.standard_normal(2))
    for k in range(n):
        z = x[k].copy()
        noise = np.sqrt(h) * rng.standard_normal((n_sub, 2)) @ spec.gamma.T
        for j in range(n_sub):
            z = z + h * lv_drift(spec, z)[0] + z * noise[j]
            if np.any(z < POSITIVITY_FLOOR):
                raise PositivityViolation(f"abundance fell below {POSITIVITY_FLOOR} at step {k}")
        x[k + 1] = z
    eps = mvn_sample(-0.5 * np.diag(spec.obs_cov), cholesky(spec.obs_cov), rng, n + 1)
    y = spec.c[None] * x * np.exp(eps)
    times = spec.delta * np.arange(n + 1)
    return times, x, y
