r"""The Sine diffusion :math:`dX_t = \sin(X_t - \theta)dt + dW_t` observed in Gaussian noise.

The drift is the gradient of :math:`A_\theta(x) = -\cos(x - \theta)` and
:math:`\psi_\theta(x) = (\sin^2(x-\theta) + \cos(x-\theta))/2` lies in
``[-1/2, 1]``, so General Poisson estimators, their accept-reject bound and
exact simulation are all available.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from pmsmooth.core import DensityDraw, SsmDefinition
from pmsmooth.estimators import (
    GpeConfig,
    gpe_grad_log_transition,
    gpe_transition_estimate,
    isotropic_gaussian_logpdf,
    sample_exact_diffusion,
)

PSI_LOWER = -0.5
PSI_UPPER = 1.0


@dataclass(frozen=True)
class SineSpec:
    """Sine model observed at ``t_k = k * delta`` with ``Y_k = X_{t_k} + eps_k``.

    ``x0_mean``/``x0_var`` define the Gaussian law of the initial state.
    ``zero_drift`` switches to plain Brownian motion (testing only).
    ``estimator_reps`` is the number of GPE draws averaged per density
    estimate.
    """

    theta: float = np.pi / 4
    obs_variance: float = 1.0
    delta: float = 0.5
    x0_mean: float = 0.0
    x0_var: float = 1.0
    zero_drift: bool = False
    estimator_reps: int = 1


def sine_gpe_config(zero_drift: bool = False) -> GpeConfig:
    if zero_drift:
        zero = lambda t, x: np.zeros(x.shape[:-1])
        return GpeConfig(
            potential=zero,
            drift=lambda t, x: np.zeros_like(x),
            phi=zero,
            lower_bound=0.0,
            upper_bound=1.0,
            grad_potential=lambda t, x: np.zeros(x.shape[:-1] + (1,)),
            grad_phi=lambda t, x: np.zeros(x.shape[:-1] + (1,)),
            potential_max=0.0,
        )

    def potential(t, x):
        return -np.cos(x[..., 0] - t)

    def phi(t, x):
        u = x[..., 0] - t
        return 0.5 * (np.sin(u) ** 2 + np.cos(u)) - PSI_LOWER

    def grad_phi(t, x):
        u = x - t
        return 0.5 * np.sin(u) * (1.0 - 2.0 * np.cos(u))

    return GpeConfig(
        potential=potential,
        drift=lambda t, x: np.sin(x - t),
        phi=phi,
        lower_bound=PSI_LOWER,
        upper_bound=PSI_UPPER,
        grad_potential=lambda t, x: -np.sin(x - t),
        grad_phi=grad_phi,
        grad_lower_bound=lambda t: np.zeros(1),
        potential_max=1.0,
    )


def sine_proposal_moments(spec: SineSpec, x, y):
    """Mean and variance of the Gaussian ``q_Euler * g`` proposal."""
    drift = 0.0 if spec.zero_drift else np.sin(x - spec.theta)
    prior_mean = x + spec.delta * drift
    var = spec.delta * spec.obs_variance / (spec.delta + spec.obs_variance)
    mean = var * (prior_mean / spec.delta + y / spec.obs_variance)
    return mean, var


def sine_model(spec: SineSpec) -> SsmDefinition:
    """Particle model using GPE transition estimates and the Euler/observation proposal."""
    cfg = sine_gpe_config(spec.zero_drift)
    th, dt, reps = spec.theta, spec.delta, int(spec.estimator_reps)
    lo, _ = cfg.bounds(th)
    sd0 = np.sqrt(spec.x0_var)

    def estimator(k, x, xn, rng):
        if reps == 1:
            return DensityDraw(gpe_transition_estimate(cfg, th, x, xn, dt, rng))
        v = gpe_transition_estimate(
            cfg, th, np.repeat(x, reps, axis=0), np.repeat(xn, reps, axis=0), dt, rng
        )
        return DensityDraw(v.reshape(-1, reps).mean(axis=1))

    def grad_log(k, x, xn, rng):
        return gpe_grad_log_transition(cfg, th, x, xn, dt, rng)

    def obs_density(k, x, y):
        return np.exp(isotropic_gaussian_logpdf(x, np.reshape(y, (1, 1)), spec.obs_variance))

    def prop_sample(k, x, y, rng):
        mean, var = sine_proposal_moments(spec, x, np.reshape(y, (1, 1)))
        return mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def prop_density(k, x, xn, y):
        mean, var = sine_proposal_moments(spec, x, np.reshape(y, (1, 1)))
        return np.exp(isotropic_gaussian_logpdf(xn, mean, var))

    def bound(k, src, xn):
        # GPE draws never exceed the Girsanov prefactor; take its max over sources
        src = np.atleast_2d(src)
        xn = np.atleast_2d(xn)
        log_pref = (
            -0.5 * np.log(2 * np.pi * dt)
            - (xn[:, None, 0] - src[None, :, 0]) ** 2 / (2 * dt)
            + cfg.potential(th, xn)[:, None]
            - cfg.potential(th, src)[None, :]
            - lo * dt
        )
        return np.exp(log_pref.max(axis=1))

    return SsmDefinition(
        state_dim=1,
        obs_dim=1,
        param_dim=1,
        initial_sampler=lambda n, rng: spec.x0_mean + sd0 * rng.standard_normal((n, 1)),
        initial_density_ratio=lambda x: np.ones(x.shape[0]),
        proposal_sampler=prop_sample,
        proposal_density=prop_density,
        obs_density=obs_density,
        transition_estimator=estimator,
        transition_estimator_is_positive=True,
        obs_density_grad=lambda k, x, y: np.zeros((x.shape[0], 1)),
        grad_log_transition_estimator=grad_log,
        transition_bound=bound,
        name="sine",
    )


def sine_family(spec: SineSpec):
    """Map ``theta`` (array of shape ``(1,)`` or scalar) to the particle model."""
    return lambda theta: sine_model(replace(spec, theta=float(np.ravel(theta)[0])))


def simulate_sine(spec: SineSpec, n: int, rng, method: str = "exact", euler_step: float = 1e-4):
    """Simulate ``(times, X_{0:n}, Y_{0:n})``.

    ``method="exact"`` uses retrospective exact sampling of each increment;
    ``"euler"`` uses a fine Euler scheme with step ``euler_step``.
    """
    cfg = sine_gpe_config(spec.zero_drift)
    x = np.zeros(n + 1)
    x[0] = spec.x0_mean + np.sqrt(spec.x0_var) * rng.standard_normal()
    if method == "exact":
        for k in range(n):
            x[k + 1] = sample_exact_diffusion(cfg, spec.theta, [[x[k]]], spec.delta, rng)[0, 0]
    elif method == "euler":
        n_sub = max(1, int(round(spec.delta / euler_step)))
        h = spec.delta / n_sub
        for k in range(n):
            z = x[k]
            noise = np.sqrt(h) * rng.standard_normal(n_sub)
            for j in range(n_sub):
                drift = 0.0 if spec.zero_drift else np.sin(z - spec.theta)
                z = z + h * drift + noise[j]
            x[k + 1] = z
    else:
        raise ValueError(f"unknown simulation method {method!r}")
    y = x + np.sqrt(spec.obs_variance) * rng.standard_normal(n + 1)
    times = spec.delta * np.arange(n + 1)
    return times, x, y
