"""Ready-made additive functionals of the hidden trajectory."""

from __future__ import annotations

import numpy as np

from pmsmooth.core import AdditiveFunctional
from pmsmooth.errors import ConfigError


def state_at(k_star: int, dim: int) -> AdditiveFunctional:
    """``X_{k*}``; the smoothed estimate is ``E[X_{k*} | Y_{0:n}]`` for any ``n >= k*``."""
    if k_star < 0:
        raise ConfigError("k_star must be nonnegative")

    def increment(k, x, xn):
        return x if k == k_star else np.zeros_like(x)

    def terminal(n, x):
        return x if n == k_star else np.zeros_like(x)

    return AdditiveFunctional(dim, increment, terminal=terminal, name=f"state_at_{k_star}")


def cumulative_state(dim: int) -> AdditiveFunctional:
    """``sum_{k=0}^n X_k``."""
    return AdditiveFunctional(
        dim, lambda k, x, xn: x, terminal=lambda n, x: x, name="cumulative_state"
    )


def all_states(n_max: int, dim: int) -> AdditiveFunctional:
    """Stacked ``(X_0, ..., X_{n_max})`` as one vector of length ``(n_max + 1) * dim``.

    Smoothing it gives every marginal ``E[X_k | Y_{0:n}]`` in a single pass.
    Coordinates past the final time ``n`` stay zero.
    """
    out = (n_max + 1) * dim

    def block(k):
        if k > n_max:
            raise ConfigError(f"horizon {k} exceeds n_max={n_max}")
        return slice(k * dim, (k + 1) * dim)

    def terminal(n, x):
        block(n)
        full = np.zeros((x.shape[0], out))
        full[:, n * dim : (n + 1) * dim] = x
        return full

    return AdditiveFunctional(
        out,
        lambda k, x, xn: x,
        terminal=terminal,
        columns=block,
        name="all_states",
    )


def step_count() -> AdditiveFunctional:
    """Constant increment 1, so the functional equals the number of transitions."""
    return AdditiveFunctional(1, lambda k, x, xn: np.ones((x.shape[0], 1)), name="step_count")


def score_functional(model, observations, rng) -> AdditiveFunctional:
    """Complete-data score ``sum_k grad log q_k(x_k, x_{k+1}) + sum_k grad log g_k(x_k)``.

    Transition terms use the model's unbiased gradient estimator with draws
    from ``rng``; ``observations`` supplies ``y_k`` for the observation terms.
    """
    if model.grad_log_transition_estimator is None:
        raise ConfigError("model has no gradient estimator for the log transition density")
    obs = np.asarray(observations, dtype=float).reshape(-1, model.obs_dim)

    def grad_log_obs(k, x):
        if model.obs_density_grad is None:
            return np.zeros((x.shape[0], model.param_dim))
        g = model.obs_density(k, x, obs[k])
        grad = model.obs_density_grad(k, x, obs[k])
        return np.where(g[:, None] > 0, grad / np.where(g > 0, g, 1.0)[:, None], 0.0)

    def increment(k, x, xn):
        est = np.asarray(model.grad_log_transition_estimator(k, x, xn, rng), dtype=float)
        return est + grad_log_obs(k, x)

    return AdditiveFunctional(model.param_dim, increment, terminal=grad_log_obs, name="score")
