"""Recursive maximum likelihood with the particle tangent filter.

Each observation ``y_k`` moves the particle system one step under the current
parameter, updates per-particle backward statistics of the complete-data
score and turns them into an estimate of ``grad log p(y_k | y_{0:k-1})``.
The parameter then takes a Robbins-Monro step, and iterates past the burn-in
are averaged (Polyak-Ruppert).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from pmsmooth.core import AdditiveFunctional, ParticleCloud, SsmDefinition, derive_rng, root_seed
from pmsmooth.errors import ConfigError, NonFiniteGradient, ZeroLikelihood
from pmsmooth.smoother import (
    SmootherConfig,
    backward_weights_wald,
    init_filter,
    propagate_wald,
    update_backward_stats_is,
)

MAX_SCORE_NORM = 1e3


@dataclass(frozen=True)
class StepSizeSchedule:
    """``gamma_k = gamma0`` for ``k <= burn_in``, then ``gamma0 / (k - burn_in)^kappa``."""

    gamma0: float = 0.5
    burn_in: int = 300
    kappa: float = 0.6

    def __post_init__(self):
        if self.gamma0 < 0:
            raise ConfigError("gamma0 must be nonnegative")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be nonnegative")
        if not 0.5 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0.5, 1]")

    def __call__(self, k: int) -> float:
        if k <= self.burn_in:
            return self.gamma0
        return self.gamma0 / (k - self.burn_in) ** self.kappa


@dataclass
class RmlState:
    """Parameter iterate with the tangent-filter particle system.

    ``cloud`` is the filter at time ``k`` whose backward statistics estimate
    the complete-data score ``E[sum_{j<k} grad log(q_j g_j) | X_k]``;
    ``last_score`` is the estimate of ``grad log p(y_k | y_{0:k-1})`` used
    for the latest step.
    """

    theta: np.ndarray
    cloud: ParticleCloud
    k: int
    last_obs: np.ndarray
    burn_in: int
    polyak_sum: np.ndarray
    polyak_count: int = 0
    log: list = field(default_factory=list)
    last_score: Optional[np.ndarray] = None

    @property
    def polyak(self) -> np.ndarray:
        return polyak_average(self)


def polyak_average(state: RmlState) -> np.ndarray:
    """Mean of the iterates after the burn-in, or the current iterate before it."""
    if state.polyak_count == 0:
        return state.theta.copy()
    return state.polyak_sum / state.polyak_count


def init_rml(
    model_family: Callable[[np.ndarray], SsmDefinition],
    theta0,
    y0,
    cfg: SmootherConfig,
    rng,
    burn_in: int = 300,
) -> RmlState:
    theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
    model = model_family(theta)
    if theta.size != model.param_dim:
        raise ConfigError(f"theta has {theta.size} entries, model expects {model.param_dim}")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    cloud = init_filter(model, cfg, rng, y0=y0, stat_dim=model.param_dim)
    return RmlState(theta, cloud, 0, y0, int(burn_in), np.zeros_like(theta))


def tangent_score(weights, g, grad_g, tau) -> np.ndarray:
    """Score of the predictive likelihood from a weighted predictive sample.

    ``weights`` are the predictive weights of the particles, ``g`` and
    ``grad_g`` the observation density and its parameter gradient at each
    particle, ``tau`` the backward score statistics. Returns
    ``(eta[grad g] + cov_eta(tau, g)) / eta[g]`` where ``eta`` is the weighted
    empirical measure.

    Raises:
        ZeroLikelihood: ``eta[g]`` is zero.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    g = np.asarray(g, dtype=float)
    eta_g = w @ g
    if not eta_g > 0:
        raise ZeroLikelihood("predictive likelihood estimate is zero")
    tau = np.asarray(tau, dtype=float)
    # centring tau first makes the covariance exactly shift invariant
    centred = tau - w @ tau
    tangent = (w * g) @ centred
    return (w @ np.asarray(grad_g, dtype=float) + tangent) / eta_g


def score_increment(model: SsmDefinition, cloud: ParticleCloud, y_k) -> np.ndarray:
    """Estimate of ``grad log p(y_k | y_{0:k-1})`` from a propagated cloud.

    ``cloud`` holds the particles at time ``k`` drawn from the predictive
    law, their predictive weights in ``diagnostics["pred_weights"]`` and the
    backward score statistics.
    """
    if model.obs_density_grad is None:
        raise ConfigError("model has no observation-density gradient")
    x = cloud.particles
    g = model.obs_density(cloud.step, x, y_k)
    grad_g = model.obs_density_grad(cloud.step, x, y_k)
    pred = cloud.diagnostics.get("pred_weights", np.ones(cloud.n_particles))
    return tangent_score(pred, g, grad_g, cloud.backward_stats)


def _score_functional(model: SsmDefinition, y_prev, rng) -> AdditiveFunctional:
    """One-step functional ``grad log q_hat(x, x') + grad log g(x, y_prev)``."""
    if model.grad_log_transition_estimator is None:
        raise ConfigError("model has no gradient estimator for the log transition density")

    def increment(k, x, xn):
        out = np.asarray(model.grad_log_transition_estimator(k, x, xn, rng), dtype=float)
        if model.obs_density_grad is not None:
            g = model.obs_density(k, x, y_prev)
            grad_g = model.obs_density_grad(k, x, y_prev)
            safe = np.where(g > 0, g, 1.0)
            out = out + np.where(g[:, None] > 0, grad_g / safe[:, None], 0.0)
        return out

    return AdditiveFunctional(model.param_dim, increment, name="score")


def rml_step(
    model_family: Callable[[np.ndarray], SsmDefinition],
    state: RmlState,
    y_k,
    schedule: StepSizeSchedule,
    cfg: SmootherConfig,
    rng,
) -> RmlState:
    """Process one observation and return the updated state.

    Raises:
        NonFiniteGradient: the score increment is not finite or its norm
            exceeds ``1e3``.
    """
    t0 = time.perf_counter_ns()
    root = root_seed(rng)
    k = state.k + 1
    y_k = np.atleast_1d(np.asarray(y_k, dtype=float))
    model = model_family(state.theta)
    prev = state.cloud
    new = propagate_wald(model, prev, y_k, cfg, derive_rng(root, k, 1))
    functional = _score_functional(model, state.last_obs, derive_rng(root, k, 3))
    draws = backward_weights_wald(model, prev, new.particles, cfg, derive_rng(root, k, 2))
    new.backward_stats = update_backward_stats_is(prev, new.particles, draws, functional)
    incr = score_increment(model, new, y_k)
    norm = float(np.linalg.norm(incr))
    if not np.all(np.isfinite(incr)) or norm > MAX_SCORE_NORM:
        raise NonFiniteGradient(f"score increment with norm {norm} at step {k}")
    gamma = schedule(k)
    theta = state.theta + gamma * incr
    psum, pcount = state.polyak_sum, state.polyak_count
    if k > state.burn_in:
        psum, pcount = psum + theta, pcount + 1
    out = RmlState(theta, new, k, y_k, state.burn_in, psum, pcount, state.log, incr)
    out.log.append((k, theta.copy(), polyak_average(out), gamma, norm, time.perf_counter_ns() - t0))
    return out


def run_rml(
    model_family: Callable[[np.ndarray], SsmDefinition],
    observations,
    theta0,
    schedule: StepSizeSchedule,
    cfg: SmootherConfig,
    rng,
    callback: Optional[Callable[[RmlState], None]] = None,
) -> RmlState:
    """Run recursive MLE over ``observations`` of shape ``(n + 1, m)``."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    root = root_seed(rng)
    state = init_rml(model_family, theta0, obs[0], cfg, derive_rng(root, 0, 0), schedule.burn_in)
    for k in range(1, obs.shape[0]):
        state = rml_step(model_family, state, obs[k], schedule, cfg, root)
        if callback is not None:
            callback(state)
    return state


def write_iterate_log(state: RmlState, path) -> None:
    """CSV with columns ``k, theta_*, polyak_*, gamma, score_norm, wall_time_ns``."""
    q = state.theta.size
    header = ["k"] + [f"theta_{i}" for i in range(q)] + [f"polyak_{i}" for i in range(q)]
    header += ["gamma", "score_norm", "wall_time_ns"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k, th, pa, gamma, norm, ns in state.log:
            wr.writerow([k, *map(repr, map(float, th)), *map(repr, map(float, pa)), repr(gamma), repr(norm), ns])
