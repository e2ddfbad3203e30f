"""Domain types and weight utilities shared by the smoother, estimators and models.

Conventions used throughout the package:

* States are arrays of shape ``(M, d)``; every model callable is vectorised
  over the leading axis so that a whole particle system (or a batch of
  backward pairs) is processed in one call.
* Densities are with respect to Lebesgue measure and weights are kept in
  linear space (signed estimator draws have to be summed, see the Wald loops
  in :mod:`pmsmooth.smoother`).
* Transition kernels are indexed by their source time: the callables taking
  ``(k, x, x_next)`` describe the move from ``X_k`` to ``X_{k+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from pmsmooth.errors import AllZeroWeights, ConfigError, NonFiniteWeight

Array = np.ndarray


@dataclass(frozen=True)
class DensityDraw:
    """One batch of realisations of an unbiased transition-density estimator.

    ``value[i]`` is the estimate for the i-th pair of states; it may be
    negative for signed estimators. ``aux`` carries the auxiliary randomness
    (Poisson counts, skeleton sizes, ...) for diagnostics only.
    """

    value: Array
    aux: Any = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteWeight("transition estimator returned a non-finite value")


@dataclass(frozen=True)
class SsmDefinition:
    """A state space model with an intractable transition density.

    The transition density is only accessed through ``transition_estimator``,
    which must be unbiased conditionally on the pair of states. Every other
    callable is exact.

    Attributes:
        state_dim: dimension ``d`` of the latent state.
        obs_dim: dimension ``m`` of an observation.
        param_dim: dimension ``q`` of the parameter (used by recursive MLE).
        initial_sampler: ``(n, rng) -> (n, d)`` draws from the initial proposal.
        initial_density_ratio: ``x -> (n,)`` ratio of the initial law to the
            initial proposal.
        proposal_sampler: ``(k, x_k, y_{k+1}, rng) -> x_{k+1}``.
        proposal_density: ``(k, x_k, x_{k+1}, y_{k+1}) -> (n,)``, strictly
            positive wherever the sampler lands.
        obs_density: ``(k, x_k, y_k) -> (n,)``.
        transition_estimator: ``(k, x_k, x_{k+1}, rng) -> DensityDraw``.
        transition_estimator_is_positive: True when every draw is >= 0.
        obs_density_grad: ``(k, x_k, y_k) -> (n, q)``, gradient in the
            parameter of the observation density.
        grad_log_transition_estimator: ``(k, x_k, x_{k+1}, rng) -> (n, q)``,
            unbiased for the parameter gradient of the log transition density.
        transition_bound: ``(k, sources, x_{k+1}) -> (n,)``, an almost sure
            upper bound of the estimator from any row of ``sources`` to each
            row of ``x_{k+1}``; enables accept-reject backward sampling.
    """

    state_dim: int
    obs_dim: int
    param_dim: int
    initial_sampler: Callable[[int, np.random.Generator], Array]
    initial_density_ratio: Callable[[Array], Array]
    proposal_sampler: Callable[[int, Array, Array, np.random.Generator], Array]
    proposal_density: Callable[[int, Array, Array, Array], Array]
    obs_density: Callable[[int, Array, Array], Array]
    transition_estimator: Callable[[int, Array, Array, np.random.Generator], DensityDraw]
    transition_estimator_is_positive: bool
    obs_density_grad: Optional[Callable[[int, Array, Array], Array]] = None
    grad_log_transition_estimator: Optional[
        Callable[[int, Array, Array, np.random.Generator], Array]
    ] = None
    transition_bound: Optional[Callable[[int, Array, Array], Array]] = None
    name: str = "ssm"

    def __post_init__(self):
        for attr in ("state_dim", "obs_dim", "param_dim"):
            if int(getattr(self, attr)) < 1:
                raise ConfigError(f"{attr} must be a positive integer")


@dataclass(frozen=True)
class AdditiveFunctional:
    """Sum of increments ``h_k(x_k, x_{k+1})`` over a trajectory.

    ``terminal`` is an optional extra term ``f(n, x_n)`` evaluated on the last
    state only; it lets functionals such as "the state at the final time" be
    written without knowing the horizon in advance. The backward statistics
    never include it.

    When ``columns`` is given, ``increment(k, ...)`` returns only the output
    columns ``columns(k)`` (a slice); every other column of the increment is
    zero. This keeps functionals with a large, mostly empty output cheap.
    """

    out_dim: int
    increment: Callable[[int, Array, Array], Array]
    terminal: Optional[Callable[[int, Array], Array]] = None
    columns: Optional[Callable[[int], slice]] = None
    name: str = "functional"

    def increment_block(self, k: int, x: Array, x_next: Array) -> tuple[slice, Array]:
        values = np.asarray(self.increment(k, x, x_next), dtype=float)
        cols = self.columns(k) if self.columns is not None else slice(0, self.out_dim)
        return cols, values.reshape(x.shape[0], -1)

    def full_increment(self, k: int, x: Array, x_next: Array) -> Array:
        cols, values = self.increment_block(k, x, x_next)
        if self.columns is None:
            return values
        out = np.zeros((x.shape[0], self.out_dim))
        out[:, cols] = values
        return out

    def evaluate_path(self, path: Array) -> Array:
        """Evaluate the functional on trajectories of shape ``(M, n + 1, d)``."""
        path = np.asarray(path, dtype=float)
        total = np.zeros((path.shape[0], self.out_dim))
        n = path.shape[1] - 1
        for k in range(n):
            cols, values = self.increment_block(k, path[:, k], path[:, k + 1])
            total[:, cols] += values
        if self.terminal is not None:
            total += self.terminal(n, path[:, n])
        return total


@dataclass
class ParticleCloud:
    """Weighted particle system at one time step, with backward statistics."""

    step: int
    particles: Array
    weights: Array
    backward_stats: Array
    ancestors: Array
    wald_rounds: int = 1
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    def normalized_weights(self) -> Array:
        return normalize_weights(self.weights)

    def with_stats(self, backward_stats: Array) -> "ParticleCloud":
        return replace(self, backward_stats=backward_stats)


def _check_weights(weights) -> Array:
    w = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)):
        raise NonFiniteWeight("weights contain NaN or infinity")
    if np.any(w < 0):
        raise NonFiniteWeight("weights must be nonnegative")
    if not np.any(w > 0):
        raise AllZeroWeights("every weight is zero")
    return w


def normalize_weights(weights) -> Array:
    """Return ``weights / sum(weights)``.

    Raises:
        AllZeroWeights: every weight is zero.
        NonFiniteWeight: a weight is NaN, infinite or negative.
    """
    w = _check_weights(weights)
    # rescale first so huge weights do not overflow the sum
    w = w / w.max()
    return w / w.sum()


def weighted_mean(cloud: ParticleCloud, h: Callable[[Array], Array] | None = None) -> Array:
    """Self-normalised estimate of ``E[h(X_k)]`` under the cloud's weights."""
    p = normalize_weights(cloud.weights)
    values = cloud.particles if h is None else np.asarray(h(cloud.particles), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return p @ values


def multinomial_indices(probabilities, count: int, rng: np.random.Generator) -> Array:
    """Draw ``count`` i.i.d. indices from a categorical distribution.

    Category counts are drawn in one multinomial call and the repeated
    indices are shuffled, which has the same joint law as ``count``
    independent draws and costs ``O(N + count)``. Indices with zero mass are
    never returned.
    """
    p = np.asarray(probabilities, dtype=float)
    p = p / p.sum()
    counts = rng.multinomial(int(count), p)
    return rng.permutation(np.repeat(np.arange(p.size), counts))


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = _check_weights(weights)
    w = w / w.max()
    return float(w.sum() ** 2 / np.sum(w * w))


def derive_rng(seed, *key: int) -> np.random.Generator:
    """Generator for the stream ``key`` of a root seed.

    Streams with distinct keys are statistically independent and do not
    depend on the order in which they are requested.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        base_key = tuple(seed.spawn_key)
    else:
        entropy, base_key = int(seed), ()
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=base_key + tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def root_seed(rng) -> np.random.SeedSequence:
    """Turn an int, SeedSequence or Generator into a root SeedSequence."""
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    return np.random.SeedSequence(int(rng))


def as_states(x, dim: int | None = None) -> Array:
    """Promote a state or batch of states to shape ``(M, d)``."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1) if dim == 1 else a.reshape(1, -1)
    return a
