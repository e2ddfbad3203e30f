"""Stochastic recurrent network as a state space model.

``X_k = tanh(W1 Y_{k-1} + W2 X_{k-1} + b + eta_k)`` and
``Y_k = W3 X_k + c + eps_k`` with Gaussian ``eta``, ``eps`` and
``X_0 ~ N(0, Sigma)``. The transition density is known in closed form
through the change of variables ``u = atanh(x)``, so it is exposed as an
exact, positive "estimator".

The transition into ``X_{k+1}`` depends on ``Y_k``, so the particle model is
built for a fixed observation record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pmsmooth.core import DensityDraw, SsmDefinition
from pmsmooth.errors import ConfigError, DimensionMismatch, DomainError

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class RnnSsmSpec:
    """Weights of the noisy one-layer RNN.

    ``W1`` is ``(d, m)``, ``W2`` is ``(d, d)``, ``W3`` is ``(m, d)``. The
    covariances are diagonal and stored as variance vectors.
    """

    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    b: np.ndarray
    c: np.ndarray
    sigma0_var: np.ndarray
    q_var: np.ndarray
    r_var: np.ndarray

    def __post_init__(self):
        for name in ("W1", "W2", "W3"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("b", "c", "sigma0_var", "q_var", "r_var"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        d, m = self.W1.shape
        if self.W2.shape != (d, d) or self.W3.shape != (m, d):
            raise ConfigError("inconsistent RNN weight shapes")
        if self.b.shape != (d,) or self.c.shape != (m,):
            raise ConfigError("inconsistent RNN bias shapes")
        if self.sigma0_var.shape != (d,) or self.q_var.shape != (d,) or self.r_var.shape != (m,):
            raise ConfigError("inconsistent RNN covariance shapes")
        for name in ("sigma0_var", "q_var", "r_var"):
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"{name} must be positive")

    @property
    def state_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def synthetic(cls, state_dim: int = 8, obs_dim: int = 4, seed: int = 0, variance: float = 0.1):
        """Seeded Gaussian weights scaled by ``1/sqrt(fan_in)``.

        Stands in for weights of a network trained on real data.
        """
        rng = np.random.default_rng(seed)
        d, m = state_dim, obs_dim
        return cls(
            W1=rng.standard_normal((d, m)) / np.sqrt(m),
            W2=rng.standard_normal((d, d)) / np.sqrt(d),
            W3=rng.standard_normal((m, d)) / np.sqrt(d),
            b=0.1 * rng.standard_normal(d),
            c=0.1 * rng.standard_normal(m),
            sigma0_var=np.full(d, variance),
            q_var=np.full(d, variance),
            r_var=np.full(m, variance),
        )


def _pre_activation(spec: RnnSsmSpec, x, y_prev):
    return x @ spec.W2.T + (spec.W1 @ y_prev + spec.b)[None]


def _diag_logpdf(z, mean, var):
    r = z - mean
    return -0.5 * np.sum(_LOG_2PI + np.log(var) + r * r / var, axis=-1)


def rnn_transition_logpdf(spec: RnnSsmSpec, x, x_next, y_prev) -> np.ndarray:
    """Log density of ``X_{k+1} = x_next`` given ``X_k = x`` and ``Y_k = y_prev``.

    Raises:
        DomainError: a coordinate of ``x_next`` is outside ``(-1, 1)``.
    """
    xn = np.atleast_2d(x_next)
    if np.any(np.abs(xn) >= 1.0):
        raise DomainError("RNN state coordinate reached +-1")
    u = np.arctanh(xn)
    mean = _pre_activation(spec, np.atleast_2d(x), np.asarray(y_prev, dtype=float))
    return _diag_logpdf(u, mean, spec.q_var) - np.sum(np.log1p(-xn * xn), axis=-1)


def _sample_transition(spec, x, y_prev, rng):
    mean = _pre_activation(spec, x, y_prev)
    out = np.tanh(mean + np.sqrt(spec.q_var) * rng.standard_normal(mean.shape))
    # tanh saturates to exactly +-1 in floating point for |u| > ~19
    return np.clip(out, -1.0 + 1e-15, 1.0 - 1e-15)


def simulate_rnn_ssm(spec: RnnSsmSpec, n: int, rng):
    """Draw ``(X_{0:n}, Y_{0:n})`` with shapes ``(n+1, d)`` and ``(n+1, m)``."""
    d, m = spec.state_dim, spec.obs_dim
    x = np.zeros((n + 1, d))
    y = np.zeros((n + 1, m))
    x[0] = np.sqrt(spec.sigma0_var) * rng.standard_normal(d)
    for k in range(n + 1):
        if k > 0:
            x[k] = _sample_transition(spec, x[k - 1][None], y[k - 1], rng)[0]
        y[k] = spec.W3 @ x[k] + spec.c + np.sqrt(spec.r_var) * rng.standard_normal(m)
    return x, y


def rnn_model(spec: RnnSsmSpec, observations) -> SsmDefinition:
    """Bootstrap particle model for a given observation record ``(n+1, m)``."""
    d, m = spec.state_dim, spec.obs_dim
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != m:
        raise DimensionMismatch(f"expected observations of shape (n+1, {m}), got {obs.shape}")

    def estimator(k, x, xn, rng):
        return DensityDraw(np.exp(rnn_transition_logpdf(spec, x, xn, obs[k])))

    def obs_density(k, x, y):
        mean = x @ spec.W3.T + spec.c[None]
        return np.exp(_diag_logpdf(np.asarray(y, dtype=float)[None], mean, spec.r_var))

    def bound(k, src, xn):
        # peak of the Gaussian in u-space times the Jacobian at x_next
        xn = np.atleast_2d(xn)
        log_peak = -0.5 * np.sum(_LOG_2PI + np.log(spec.q_var))
        return np.exp(log_peak - np.sum(np.log1p(-xn * xn), axis=-1))

    return SsmDefinition(
        state_dim=d,
        obs_dim=m,
        param_dim=1,
        initial_sampler=lambda n, rng: np.sqrt(spec.sigma0_var) * rng.standard_normal((n, d)),
        initial_density_ratio=lambda x: np.ones(x.shape[0]),
        proposal_sampler=lambda k, x, y, rng: _sample_transition(spec, x, obs[k], rng),
        proposal_density=lambda k, x, xn, y: np.exp(rnn_transition_logpdf(spec, x, xn, obs[k])),
        obs_density=obs_density,
        transition_estimator=estimator,
        transition_estimator_is_positive=True,
        transition_bound=bound,
        name="rnn",
    )
