"""Online particle smoothing with random, possibly signed, weights.

The forward pass is a random-weight particle filter whose weights are made
positive with Wald's trick: fresh estimator draws are added to every weight
until all of them are positive (see :func:`wald_stopped` for the one
exception, sums whose draws all underflowed to 0). Backward statistics of
an additive functional are then updated online, per particle, by one of

* ``BackwardIS``: backward importance sampling, indices drawn from the
  filter weights and reweighted by Wald-positivised estimator draws;
* ``BackwardAR``: exact accept-reject sampling from the backward kernel,
  which needs a positive estimator with an almost sure upper bound;
* ``PathSpace``: the ancestral-line (poor man's) smoother.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from pmsmooth.core import (
    AdditiveFunctional,
    ParticleCloud,
    SsmDefinition,
    derive_rng,
    ess,
    multinomial_indices,
    normalize_weights,
    root_seed,
)
from pmsmooth.errors import (
    AllZeroWeights,
    ConfigError,
    InvalidBound,
    NonFiniteWeight,
    RejectionBudgetExceeded,
    WaldBudgetExceeded,
    ZeroNormalizer,
)

Array = np.ndarray


class Method(str, Enum):
    BACKWARD_IS = "BackwardIS"
    BACKWARD_AR = "BackwardAR"
    PATH_SPACE = "PathSpace"


@dataclass(frozen=True)
class SmootherConfig:
    """Tuning of the smoother.

    ``ar_bound_fn(k, sources, x_next)`` returns, for each row of ``x_next``,
    an almost sure bound of the estimator over all rows of ``sources`` (the
    particles at time ``k``); when omitted the model's ``transition_bound``
    is used.
    """

    n_particles: int
    n_backward: int = 2
    method: Method = Method.BACKWARD_IS
    wald_max_rounds: int = 1000
    ar_bound_fn: Optional[Callable[[int, Array, Array], Array]] = None
    ar_max_proposals: int = 10**6

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.n_particles < 1 or self.n_backward < 1:
            raise ConfigError("n_particles and n_backward must be positive")
        if self.wald_max_rounds < 1:
            raise ConfigError("wald_max_rounds must be positive")


def default_n_backward(n_particles: int) -> int:
    """Backward sample size ``ceil(N ** 0.6)`` used for benchmarks."""
    return int(np.ceil(n_particles**0.6 - 1e-9))


@dataclass(frozen=True)
class BackwardDraws:
    """Backward indices ``J`` and Wald weights for a batch of particles.

    ``indices`` and ``weights`` have shape ``(M, K)``; ``rounds[i]`` is the
    number of Wald rounds used for row ``i``.
    """

    indices: Array
    weights: Array
    rounds: Array
    estimator_calls: int = 0

    @property
    def normalizer(self) -> Array:
        return self.weights.sum(axis=1)


@dataclass
class StepTrace:
    step: int
    ess: float
    wald_rounds_filter: int
    mean_wald_rounds_backward: float
    wall_time_ns: int


TRACE_COLUMNS = ("step", "ess", "wald_rounds_filter", "mean_wald_rounds_backward", "wall_time_ns")


def write_trace_csv(trace: Sequence[StepTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            d = asdict(row)
            writer.writerow([d[c] for c in TRACE_COLUMNS])


@dataclass
class SmoothingResult:
    estimate: Array
    trace: list = field(default_factory=list)
    cloud: Optional[ParticleCloud] = None

    @property
    def wall_time_ns(self) -> int:
        return sum(t.wall_time_ns for t in self.trace)


def _check_finite(w, what):
    if not np.all(np.isfinite(w)):
        raise NonFiniteWeight(f"non-finite {what}")


def init_filter(
    model: SsmDefinition,
    cfg: SmootherConfig,
    rng: np.random.Generator,
    y0=None,
    stat_dim: int = 1,
) -> ParticleCloud:
    """Initial weighted sample with weights ``chi / rho_0``.

    When the first observation ``y0`` is given the weights also include its
    likelihood, so the cloud targets the filter at time 0 rather than the
    prior.
    """
    n = cfg.n_particles
    x = np.asarray(model.initial_sampler(n, rng), dtype=float).reshape(n, model.state_dim)
    w = np.asarray(model.initial_density_ratio(x), dtype=float)
    if y0 is not None:
        w = w * model.obs_density(0, x, np.asarray(y0, dtype=float))
    _check_finite(w, "initial weights")
    if not np.any(w > 0):
        raise AllZeroWeights("every initial weight is zero")
    return ParticleCloud(
        step=0,
        particles=x,
        weights=w,
        backward_stats=np.zeros((n, stat_dim)),
        ancestors=np.arange(n),
        wald_rounds=1,
        diagnostics={"pred_weights": np.asarray(model.initial_density_ratio(x), dtype=float)},
    )


def wald_stopped(acc: Array, moved: Array) -> Array:
    """Stopping rule of the Wald loops, applied along the last axis.

    ``moved`` flags the sums that have received a nonzero draw. A block
    stops once every moved sum is strictly positive and at least one sum
    is. Sums that never moved stay at exactly 0: in floating point every
    draw for two states far apart can underflow to 0, and such a sum would
    otherwise never become positive. The rule only looks at past draws of
    the block, so each stopped sum keeps a mean proportional to its density.
    """
    return np.all((acc > 0) | ~moved, axis=-1) & np.any(acc > 0, axis=-1)


def _wald_sum(model, k, src, dst, positive, max_rounds, rng):
    """Sum estimator draws over all pairs until the stopping rule holds."""
    acc = np.zeros(src.shape[0])
    moved = np.zeros(src.shape[0], dtype=bool)
    rounds = 0
    while True:
        rounds += 1
        if rounds > max_rounds:
            raise WaldBudgetExceeded(f"Wald loop needed more than {max_rounds} rounds")
        vals = model.transition_estimator(k, src, dst, rng).value
        acc += vals
        moved |= vals != 0
        if positive or wald_stopped(acc, moved):
            return acc, rounds


def propagate_wald(
    model: SsmDefinition,
    cloud: ParticleCloud,
    y_next,
    cfg: SmootherConfig,
    rng: np.random.Generator,
) -> ParticleCloud:
    """One selection/mutation step of the Wald-positive random-weight filter.

    Ancestors are drawn multinomially from the current weights, new particles
    from the proposal kernel, and every weight accumulates fresh
    ``q_hat / p`` draws until the stopping rule of :func:`wald_stopped`
    holds. For an estimator flagged positive a single round is used. The returned cloud's
    ``backward_stats`` are zero placeholders of the right shape.

    Raises:
        WaldBudgetExceeded: more than ``cfg.wald_max_rounds`` rounds.
        NonFiniteWeight: a weight is NaN or infinite.
    """
    k = cloud.step
    n = cfg.n_particles
    y_next = np.asarray(y_next, dtype=float)
    anc = multinomial_indices(normalize_weights(cloud.weights), n, rng)
    x_prev = cloud.particles[anc]
    x_new = np.asarray(model.proposal_sampler(k, x_prev, y_next, rng), dtype=float)
    p = np.asarray(model.proposal_density(k, x_prev, x_new, y_next), dtype=float)
    acc, rounds = _wald_sum(
        model, k, x_prev, x_new, model.transition_estimator_is_positive, cfg.wald_max_rounds, rng
    )
    pred = acc / p
    w = pred * model.obs_density(k + 1, x_new, y_next)
    _check_finite(w, "filter weights")
    if not np.any(w > 0):
        raise AllZeroWeights(f"every filter weight is zero at step {k + 1}")
    return ParticleCloud(
        step=k + 1,
        particles=x_new,
        weights=w,
        backward_stats=np.zeros((n, cloud.backward_stats.shape[1])),
        ancestors=anc,
        wald_rounds=rounds,
        diagnostics={"pred_weights": pred, "estimator_calls": rounds * n},
    )


def backward_weights_wald(
    model: SsmDefinition,
    cloud: ParticleCloud,
    x_next,
    cfg: SmootherConfig,
    rng: np.random.Generator,
) -> BackwardDraws:
    """Backward indices and Wald-positive weights for each row of ``x_next``.

    For each target particle, ``K`` indices are drawn proportionally to the
    filter weights of ``cloud``; the ``K`` weights then accumulate fresh
    estimates of the transition density from the selected particles to the
    target until the stopping rule of :func:`wald_stopped` holds. Targets
    are independent: each one stops on its own.
    """
    k = cloud.step
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    m, kb = x_next.shape[0], cfg.n_backward
    idx = multinomial_indices(normalize_weights(cloud.weights), m * kb, rng).reshape(m, kb)
    src_all = cloud.particles[idx.ravel()]
    dst_all = np.repeat(x_next, kb, axis=0)
    acc = np.zeros((m, kb))
    moved = np.zeros((m, kb), dtype=bool)
    rounds = np.zeros(m, dtype=np.int64)
    active = np.arange(m)
    calls = 0
    positive = model.transition_estimator_is_positive
    while active.size:
        rounds[active] += 1
        if rounds[active[0]] > cfg.wald_max_rounds:
            raise WaldBudgetExceeded(
                f"backward Wald loop needed more than {cfg.wald_max_rounds} rounds"
            )
        if active.size == m:
            src, dst = src_all, dst_all
        else:
            flat = (active[:, None] * kb + np.arange(kb)[None, :]).ravel()
            src, dst = src_all[flat], dst_all[flat]
        vals = model.transition_estimator(k, src, dst, rng).value
        calls += src.shape[0]
        vals = vals.reshape(active.size, kb)
        acc[active] += vals
        moved[active] |= vals != 0
        if positive:
            break
        active = active[~wald_stopped(acc[active], moved[active])]
    _check_finite(acc, "backward weights")
    return BackwardDraws(idx, acc, rounds, calls)


def _stats_update(cloud: ParticleCloud, x_next, indices, norm_w, functional) -> Array:
    """``sum_j norm_w[i, j] * (tau[J_ij] + h(xi[J_ij], x_next[i]))``."""
    m, kb = indices.shape
    n = cloud.n_particles
    # row i holds the K entries of target i; repeated indices are summed by the product
    mix = sparse.csr_matrix(
        (norm_w.ravel(), indices.ravel(), np.arange(0, m * kb + 1, kb)), shape=(m, n)
    )
    out = np.asarray(mix @ cloud.backward_stats)
    src = cloud.particles[indices.ravel()]
    dst = np.repeat(x_next, kb, axis=0)
    cols, incr = functional.increment_block(cloud.step, src, dst)
    out[:, cols] += np.einsum("mk,mkd->md", norm_w, incr.reshape(m, kb, -1))
    return out


def update_backward_stats_is(
    cloud: ParticleCloud, x_next, draws: BackwardDraws, functional: AdditiveFunctional
) -> Array:
    """Self-normalised backward importance sampling update of the statistics.

    Returns an array of shape ``(M, d')`` with one updated statistic per row
    of ``x_next``. A common positive factor on the draw weights cancels.

    Raises:
        ZeroNormalizer: the weights of some row sum to zero.
    """
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    w = np.asarray(draws.weights, dtype=float)
    tot = w.sum(axis=1)
    if np.any(~(tot > 0)):
        raise ZeroNormalizer("backward weights sum to zero")
    return _stats_update(cloud, x_next, np.asarray(draws.indices), w / tot[:, None], functional)


def sample_backward_ar(
    model: SsmDefinition,
    cloud: ParticleCloud,
    x_next,
    cfg: SmootherConfig,
    rng: np.random.Generator,
):
    """Exact backward indices by accept-reject; returns ``(indices, proposals)``.

    A candidate index is drawn proportionally to the filter weights together
    with a fresh estimator draw, and accepted with probability
    ``draw / bound``. The auxiliary draw is discarded after acceptance.

    Raises:
        InvalidBound: a draw exceeded the bound or was negative.
        RejectionBudgetExceeded: a slot needed more than
            ``cfg.ar_max_proposals`` candidates.
    """
    if not model.transition_estimator_is_positive:
        raise ConfigError("accept-reject backward sampling needs a positive estimator")
    bound_fn = cfg.ar_bound_fn or model.transition_bound
    if bound_fn is None:
        raise ConfigError("accept-reject backward sampling needs an estimator bound")
    k = cloud.step
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    m, kb = x_next.shape[0], cfg.n_backward
    eps = np.asarray(bound_fn(k, cloud.particles, x_next), dtype=float)
    probs = normalize_weights(cloud.weights)
    out = np.empty(m * kb, dtype=np.int64)
    pending = np.arange(m * kb)
    tries = np.zeros(m * kb, dtype=np.int64)
    total = 0
    while pending.size:
        tries[pending] += 1
        if tries[pending[0]] > cfg.ar_max_proposals:
            raise RejectionBudgetExceeded("backward accept-reject exceeded its budget")
        rows = pending // kb
        cand = multinomial_indices(probs, pending.size, rng)
        vals = model.transition_estimator(k, cloud.particles[cand], x_next[rows], rng).value
        total += pending.size
        ratio = vals / eps[rows]
        if np.any(ratio > 1.0 + 1e-12) or np.any(vals < 0):
            raise InvalidBound("estimator draw outside [0, bound]")
        ok = rng.random(pending.size) < ratio
        out[pending[ok]] = cand[ok]
        pending = pending[~ok]
    return out.reshape(m, kb), total


def update_backward_stats_ar(
    model: SsmDefinition,
    cloud: ParticleCloud,
    x_next,
    cfg: SmootherConfig,
    rng: np.random.Generator,
    functional: AdditiveFunctional,
) -> Array:
    """Unweighted backward update with indices sampled exactly by accept-reject."""
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    idx, _ = sample_backward_ar(model, cloud, x_next, cfg, rng)
    uniform = np.full(idx.shape, 1.0 / idx.shape[1])
    return _stats_update(cloud, x_next, idx, uniform, functional)


def smoothing_step(
    model: SsmDefinition,
    functional: AdditiveFunctional,
    cloud: ParticleCloud,
    y_next,
    cfg: SmootherConfig,
    filter_rng: np.random.Generator,
    backward_rng: np.random.Generator,
):
    """Advance the filter and the backward statistics by one observation.

    Returns ``(new_cloud, mean_backward_rounds)``.
    """
    new = propagate_wald(model, cloud, y_next, cfg, filter_rng)
    mean_rounds = 0.0
    if cfg.method is Method.BACKWARD_IS:
        draws = backward_weights_wald(model, cloud, new.particles, cfg, backward_rng)
        stats = update_backward_stats_is(cloud, new.particles, draws, functional)
        mean_rounds = float(draws.rounds.mean())
    elif cfg.method is Method.BACKWARD_AR:
        stats = update_backward_stats_ar(model, cloud, new.particles, cfg, backward_rng, functional)
    else:
        anc = new.ancestors
        cols, incr = functional.increment_block(cloud.step, cloud.particles[anc], new.particles)
        stats = cloud.backward_stats[anc]
        stats[:, cols] += incr
    new.backward_stats = np.asarray(stats, dtype=float)
    return new, mean_rounds


def final_estimate(cloud: ParticleCloud, functional: AdditiveFunctional) -> Array:
    """``sum_i (w_i / W) (tau_i + terminal(n, xi_i))``."""
    stats = cloud.backward_stats
    if functional.terminal is not None:
        stats = stats + functional.terminal(cloud.step, cloud.particles)
    return normalize_weights(cloud.weights) @ stats


def smooth_online(
    model: SsmDefinition,
    functional: AdditiveFunctional,
    observations,
    cfg: SmootherConfig,
    rng,
) -> SmoothingResult:
    """Estimate ``E[H_{0:n}(X_{0:n}) | Y_{0:n}]`` in one forward pass.

    ``observations`` has shape ``(n + 1, m)``; ``rng`` is a seed, a
    ``SeedSequence`` or a ``Generator``. Each step uses its own random stream
    derived from the root seed, so runs are reproducible bit for bit.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs.reshape(-1, model.obs_dim)
    if obs.shape[0] < 1:
        raise ConfigError("at least one observation is needed")
    if obs.shape[1] != model.obs_dim:
        raise ConfigError("observation dimension does not match the model")
    root = root_seed(rng)
    t0 = time.perf_counter_ns()
    cloud = init_filter(model, cfg, derive_rng(root, 0, 0), y0=obs[0], stat_dim=functional.out_dim)
    trace = [StepTrace(0, ess(cloud.weights), 1, 0.0, time.perf_counter_ns() - t0)]
    for k in range(obs.shape[0] - 1):
        t0 = time.perf_counter_ns()
        cloud, mean_rounds = smoothing_step(
            model, functional, cloud, obs[k + 1], cfg, derive_rng(root, k + 1, 1), derive_rng(root, k + 1, 2)
        )
        trace.append(
            StepTrace(k + 1, ess(cloud.weights), cloud.wald_rounds, mean_rounds, time.perf_counter_ns() - t0)
        )
    return SmoothingResult(final_estimate(cloud, functional), trace, cloud)


def path_space_smoother(
    model: SsmDefinition,
    functional: AdditiveFunctional,
    observations,
    cfg: SmootherConfig,
    rng,
) -> Array:
    """Ancestral-line smoother: the functional summed along surviving paths."""
    res = smooth_online(model, functional, observations, replace(cfg, method=Method.PATH_SPACE), rng)
    return res.estimate
