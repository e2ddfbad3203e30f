r"""Unbiased transition-density estimators for partially observed diffusions.

Two families are provided:

* General Poisson estimators (GPE) for unit-diffusion SDEs
  :math:`dX_t = \nabla A_\theta(X_t)dt + dW_t` whose function
  :math:`\psi_\theta = (\|\nabla A_\theta\|^2 + \Delta A_\theta)/2` is bounded.
  They are positive by construction and come with an exact diffusion-bridge
  sampler (retrospective rejection on Brownian bridges) that also yields an
  unbiased estimate of the parameter gradient of the log transition density.
* The parametrix (continuous-time importance sampling) estimator for general
  elliptic SDEs :math:`dX_t = \alpha_\theta(X_t)dt + \sigma_\theta(X_t)dW_t`.
  It is unbiased but signed.

Every routine is vectorised: start and end points are ``(M, d)`` arrays and one
independent draw is produced per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from pmsmooth.errors import BadTimes, DegenerateDiffusion, RejectionBudgetExceeded

Array = np.ndarray
Bound = Union[float, Callable[[object], float]]

_LOG_2PI = np.log(2.0 * np.pi)


def _rows(x, d: int | None = None) -> Array:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1) if d == 1 else a.reshape(1, -1)
    return a


def _pair(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x, y = np.broadcast_arrays(x, y)
    return np.array(x), np.array(y)


def isotropic_gaussian_logpdf(z: Array, mean: Array, var) -> Array:
    """Log density of ``N(mean, var * I)`` at the rows of ``z``."""
    d = z.shape[-1]
    var = np.asarray(var, dtype=float)
    sq = np.sum((z - mean) ** 2, axis=-1)
    return -0.5 * (d * (_LOG_2PI + np.log(var)) + sq / var)


@dataclass(frozen=True)
class BridgeSkeleton:
    """Values of a bridge path at a finite set of times.

    ``times`` has shape ``(M, K)`` and ``values`` shape ``(M, K, d)``. Rows
    with fewer than ``K`` points are padded with ``inf`` times and ``nan``
    values after their last real point.
    """

    times: Array
    values: Array
    start: Array
    end: Array
    duration: float

    def count(self) -> Array:
        return np.sum(np.isfinite(self.times), axis=1)


def _bridge_fill(x: Array, y: Array, delta: float, times: Array, rng) -> Array:
    """Brownian-bridge values at sorted, inf-padded times.

    Uses ``B_t = x + W_t + (t / delta) (y - x - W_delta)`` for a Brownian
    motion ``W``, which has the law of the sequential bridge conditionals but
    needs no loop over the points. Padded entries come back as ``nan``.
    """
    m, k = times.shape
    d = x.shape[1]
    live = np.isfinite(times)
    t = np.where(live, times, delta)
    grid = np.concatenate([np.zeros((m, 1)), t, np.full((m, 1), delta)], axis=1)
    dt = np.diff(grid, axis=1)
    w = np.cumsum(np.sqrt(dt)[:, :, None] * rng.standard_normal((m, k + 1, d)), axis=1)
    frac = (t / delta)[:, :, None]
    values = x[:, None, :] + w[:, :k] + frac * (y - x - w[:, k])[:, None, :]
    values[~live] = np.nan
    return values


def sample_brownian_bridge_at(x, y, delta: float, times, rng: np.random.Generator) -> BridgeSkeleton:
    """Brownian bridge from ``(0, x)`` to ``(delta, y)`` observed at ``times``.

    ``times`` is either one ascending sequence shared by every row or an
    ``(M, K)`` array. Raises :class:`BadTimes` unless the times are strictly
    increasing inside ``(0, delta)``.
    """
    x, y = _pair(x, y)
    t = np.asarray(times, dtype=float)
    if t.ndim == 1:
        t = np.broadcast_to(t, (x.shape[0], t.size)).copy()
    if t.size:
        if np.any(np.diff(t, axis=1) <= 0) or np.any(t[:, 0] <= 0) or np.any(t[:, -1] >= delta):
            raise BadTimes("bridge times must be strictly increasing inside (0, delta)")
    return BridgeSkeleton(t, _bridge_fill(x, y, delta, t, rng), x, y, float(delta))


def _poisson_times(rng, rate: float, delta: float, m: int):
    """Sorted homogeneous Poisson points on (0, delta), inf-padded per row."""
    counts = rng.poisson(rate * delta, size=m)
    kmax = int(counts.max(initial=0))
    u = rng.uniform(0.0, delta, size=(m, kmax))
    u[np.arange(kmax)[None, :] >= counts[:, None]] = np.inf
    u.sort(axis=1)
    return counts, u


# ---------------------------------------------------------------------------
# General Poisson estimator


@dataclass(frozen=True)
class GpeConfig:
    """Unit-diffusion SDE with gradient drift and bounded ``psi``.

    All callables take ``(theta, x)`` with ``x`` of shape ``(M, d)``.

    Attributes:
        potential: ``A_theta(x)`` -> ``(M,)``.
        drift: ``grad_x A_theta(x)`` -> ``(M, d)``.
        phi: ``psi_theta(x) - lower_bound`` -> ``(M,)``, with ``psi`` as in
            the module docstring.
        lower_bound, upper_bound: global bounds of ``psi_theta`` (floats or
            callables of ``theta``).
        grad_potential: ``grad_theta A_theta(x)`` -> ``(M, q)``.
        grad_phi: ``grad_theta phi_theta(x)`` -> ``(M, q)``.
        grad_lower_bound: ``grad_theta`` of the lower bound, shape ``(q,)``.
        potential_max: ``sup_x A_theta(x)``; only needed to simulate the
            diffusion forward exactly.
    """

    potential: Callable[[object, Array], Array]
    drift: Callable[[object, Array], Array]
    phi: Callable[[object, Array], Array]
    lower_bound: Bound
    upper_bound: Bound
    grad_potential: Optional[Callable[[object, Array], Array]] = None
    grad_phi: Optional[Callable[[object, Array], Array]] = None
    grad_lower_bound: Optional[Callable[[object], Array]] = None
    potential_max: Optional[Bound] = None

    def bounds(self, theta) -> tuple[float, float]:
        lo = self.lower_bound(theta) if callable(self.lower_bound) else self.lower_bound
        hi = self.upper_bound(theta) if callable(self.upper_bound) else self.upper_bound
        if not hi > lo:
            raise ValueError("GPE upper bound must exceed the lower bound")
        return float(lo), float(hi)

    def check_bounds(self, theta, grid: Array) -> bool:
        """Spot-check ``lower <= psi <= upper`` on a grid of states."""
        lo, hi = self.bounds(theta)
        phi = self.phi(theta, _rows(grid, 1 if np.ndim(grid) == 1 else None))
        return bool(np.all(phi >= -1e-12) and np.all(phi <= hi - lo + 1e-12))


def _flat_bridge(x: Array, y: Array, delta: float, counts: Array, rng):
    """Brownian-bridge values at uniform times, stored flat row by row.

    Returns ``(row, times, values)`` where ``row[j]`` is the row of point
    ``j``; within a row the times are ascending.
    Only the live points are simulated, which is much cheaper than padded
    arrays when the counts are small on average.
    """
    m, d = x.shape
    total = int(counts.sum())
    row = np.repeat(np.arange(m), counts)
    t = rng.uniform(0.0, delta, size=total)
    t = t[np.lexsort((t, row))]
    starts = np.cumsum(counts) - counts
    first = np.zeros(total, dtype=bool)
    first[starts[counts > 0]] = True
    t_prev = np.where(first, 0.0, np.roll(t, 1))
    inc = np.sqrt(t - t_prev)[:, None] * rng.standard_normal((total, d))
    cs = np.cumsum(inc, axis=0)
    # segmented cumulative sum: subtract what earlier rows contributed
    offset = np.zeros((m, d))
    nz = counts > 0
    offset[nz] = cs[starts[nz]] - inc[starts[nz]]
    w = cs - offset[row]
    last_t = np.zeros(m)
    w_last = np.zeros((m, d))
    ends = starts + counts - 1
    last_t[nz] = t[ends[nz]]
    w_last[nz] = w[ends[nz]]
    w_end = w_last + np.sqrt(delta - last_t)[:, None] * rng.standard_normal((m, d))
    values = x[row] + w + (t / delta)[:, None] * (y - x - w_end)[row]
    return row, t, values


def gpe_transition_estimate(cfg: GpeConfig, theta, x, y, delta: float, rng) -> Array:
    """Positive unbiased estimates of the transition density over ``delta``.

    A Poisson number of uniform times with mean ``(upper - lower) * delta`` is
    drawn per row and a Brownian bridge is sampled at those times; the
    estimate is the Gaussian kernel times ``exp(A(y) - A(x) - lower * delta)``
    times the product of ``(upper - psi) / (upper - lower)`` over the points.
    """
    x, y = _pair(x, y)
    lo, hi = cfg.bounds(theta)
    rate = hi - lo
    m = x.shape[0]
    counts = rng.poisson(rate * delta, size=m)
    log_base = (
        isotropic_gaussian_logpdf(y, x, delta)
        + cfg.potential(theta, y)
        - cfg.potential(theta, x)
        - lo * delta
    )
    if counts.sum() == 0:
        return np.exp(log_base)
    row, _, values = _flat_bridge(x, y, delta, counts, rng)
    factors = 1.0 - cfg.phi(theta, values) / rate
    with np.errstate(divide="ignore"):
        log_prod = np.bincount(row, weights=np.log(factors), minlength=m)
    return np.exp(log_base + log_prod)


def _exact_bridge_at(cfg, theta, x, y, delta, query, rng, max_proposals, keep_skeleton=False):
    """Exact diffusion-bridge values at one query time per row.

    Proposals are Brownian bridges evaluated at Poisson points of rate
    ``upper - lower`` plus the query time; a proposal is accepted when every
    Poisson point's uniform mark on ``(0, upper - lower)`` exceeds ``phi`` at
    the bridge value. The query value takes no part in the test, so given
    acceptance it is a draw from the diffusion bridge. Accepted skeletons are
    only collected when ``keep_skeleton`` is set.
    """
    lo, hi = cfg.bounds(theta)
    rate = hi - lo
    m, d = x.shape
    out = np.empty((m, d))
    skel_t = [None] * m
    skel_v = [None] * m
    pending = np.arange(m)
    tries = np.zeros(m, dtype=np.int64)
    while pending.size:
        tries[pending] += 1
        if tries[pending].max() > max_proposals:
            raise RejectionBudgetExceeded(
                f"exact bridge sampler exceeded {max_proposals} proposals"
            )
        p = pending.size
        counts, ptimes = _poisson_times(rng, rate, delta, p)
        marks = rng.uniform(0.0, rate, size=ptimes.shape)
        qt = query[pending][:, None]
        times = np.concatenate([ptimes, qt], axis=1)
        marks = np.concatenate([marks, np.full((p, 1), np.inf)], axis=1)
        order = np.argsort(times, axis=1)
        times = np.take_along_axis(times, order, axis=1)
        marks = np.take_along_axis(marks, order, axis=1)
        vals = _bridge_fill(x[pending], y[pending], delta, times, rng)
        test = np.isfinite(times) & np.isfinite(marks)
        ok = np.ones(p, dtype=bool)
        if test.any():
            phi = np.full(times.shape, -np.inf)
            phi[test] = cfg.phi(theta, vals[test])
            ok = np.all(~test | (marks > phi), axis=1)
        acc = pending[ok]
        qpos = np.argmax(~np.isfinite(marks) & np.isfinite(times), axis=1)
        out[acc] = vals[ok, qpos[ok]]
        if keep_skeleton:
            for r, row in zip(np.flatnonzero(ok), acc):
                keep = np.isfinite(times[r])
                skel_t[row] = times[r, keep]
                skel_v[row] = vals[r, keep]
        pending = pending[~ok]
    return out, skel_t, skel_v, tries


def sample_diffusion_bridge(
    cfg: GpeConfig, theta, x, y, delta: float, rng, max_proposals: int = 10**6
) -> BridgeSkeleton:
    """Exact skeleton of the diffusion bridge from ``(0, x)`` to ``(delta, y)``.

    The returned skeleton holds the accepted Poisson points plus one extra
    point at an independent uniform time. Between skeleton points the path is
    a Brownian bridge, so it can be refined with
    :func:`sample_brownian_bridge_at`.

    Raises:
        RejectionBudgetExceeded: some row needed more than ``max_proposals``.
    """
    x, y = _pair(x, y)
    query = rng.uniform(0.0, delta, size=x.shape[0])
    _, st, sv, tries = _exact_bridge_at(
        cfg, theta, x, y, delta, query, rng, max_proposals, keep_skeleton=True
    )
    kmax = max(len(t) for t in st)
    times = np.full((x.shape[0], kmax), np.inf)
    values = np.full((x.shape[0], kmax, x.shape[1]), np.nan)
    for i, (t, v) in enumerate(zip(st, sv)):
        times[i, : len(t)] = t
        values[i, : len(t)] = v
    skel = BridgeSkeleton(times, values, x, y, float(delta))
    object.__setattr__(skel, "proposals", tries)
    return skel


def gpe_grad_log_transition(
    cfg: GpeConfig, theta, x, y, delta: float, rng, max_proposals: int = 10**6
) -> Array:
    """Unbiased estimates of ``grad_theta log q_theta(x, y)``, shape ``(M, q)``.

    Deterministic part ``grad A(y) - grad A(x) - grad(lower) * delta`` minus
    ``delta * grad phi`` at the exact diffusion bridge taken at a uniform time.
    """
    if cfg.grad_potential is None or cfg.grad_phi is None:
        raise ValueError("GpeConfig lacks the parameter-gradient fields")
    x, y = _pair(x, y)
    det = cfg.grad_potential(theta, y) - cfg.grad_potential(theta, x)
    if cfg.grad_lower_bound is not None:
        det = det - np.asarray(cfg.grad_lower_bound(theta), dtype=float) * delta
    query = rng.uniform(0.0, delta, size=x.shape[0])
    s, *_ = _exact_bridge_at(cfg, theta, x, y, delta, query, rng, max_proposals)
    return det - delta * cfg.grad_phi(theta, s)


def sample_exact_diffusion(
    cfg: GpeConfig, theta, x, delta: float, rng, max_proposals: int = 10**6
) -> Array:
    """Exact draws of ``X_delta`` given ``X_0 = x`` (retrospective sampling).

    The endpoint is proposed from ``N(x, delta I)`` and accepted with
    probability ``exp(A(y) - sup A)``; the path is then accepted with the same
    Poisson thinning test as :func:`sample_diffusion_bridge`. Requires
    ``cfg.potential_max``.
    """
    if cfg.potential_max is None:
        raise ValueError("exact simulation needs GpeConfig.potential_max")
    a_max = cfg.potential_max(theta) if callable(cfg.potential_max) else cfg.potential_max
    lo, hi = cfg.bounds(theta)
    rate = hi - lo
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, d = x.shape
    out = np.empty((m, d))
    pending = np.arange(m)
    tries = 0
    while pending.size:
        tries += 1
        if tries > max_proposals:
            raise RejectionBudgetExceeded("exact diffusion sampler exceeded its budget")
        p = pending.size
        xp = x[pending]
        yp = xp + np.sqrt(delta) * rng.standard_normal((p, d))
        ok = rng.random(p) < np.exp(cfg.potential(theta, yp) - a_max)
        counts, times = _poisson_times(rng, rate, delta, p)
        marks = rng.uniform(0.0, rate, size=times.shape)
        if times.shape[1]:
            vals = _bridge_fill(xp, yp, delta, times, rng)
            live = np.isfinite(times)
            phi = np.full(times.shape, -np.inf)
            phi[live] = cfg.phi(theta, vals[live])
            ok &= np.all(~live | (marks > phi), axis=1)
        out[pending[ok]] = yp[ok]
        pending = pending[~ok]
    return out


# ---------------------------------------------------------------------------
# Parametrix estimator


@dataclass(frozen=True)
class ParametrixConfig:
    """Elliptic SDE ``dX = alpha(X) dt + sigma(X) dW`` for the parametrix estimator.

    Callables take ``(theta, x)`` with ``x`` of shape ``(M, d)``.

    Attributes:
        drift: ``alpha`` -> ``(M, d)``.
        drift_divergence: ``sum_i d alpha_i / d x_i`` -> ``(M,)``.
        diffusion: ``sigma`` -> ``(M, d, d)``.
        gamma_divergence: ``v_l = sum_i d gamma_il / d x_i`` with
            ``gamma = sigma sigma^T`` -> ``(M, d)``; ``None`` for a constant
            diffusion matrix.
        gamma_second: ``sum_il d^2 gamma_il / dx_i dx_l`` -> ``(M,)``;
            ``None`` for a constant diffusion matrix.
        intensity: rate of the Poisson process of update times.
        horizon: time between the two observations.
    """

    drift: Callable[[object, Array], Array]
    drift_divergence: Callable[[object, Array], Array]
    diffusion: Callable[[object, Array], Array]
    horizon: float
    gamma_divergence: Optional[Callable[[object, Array], Array]] = None
    gamma_second: Optional[Callable[[object, Array], Array]] = None
    intensity: float = 1.0

    def __post_init__(self):
        if not self.intensity > 0:
            raise ValueError("parametrix intensity must be positive")
        if not self.horizon > 0:
            raise ValueError("parametrix horizon must be positive")


def _gamma(cfg, theta, x):
    s = cfg.diffusion(theta, x)
    return s @ np.swapaxes(s, -1, -2)


def _euler_logpdf_and_score(cfg, theta, x, z, u):
    """Log density of the frozen-coefficient Euler step and its z-gradient."""
    mean = x + u[:, None] * cfg.drift(theta, x)
    cov = u[:, None, None] * _gamma(cfg, theta, x)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDiffusion("sigma sigma^T is singular at a visited state") from exc
    r = (z - mean)[..., None]
    sol = np.linalg.solve(chol, r)[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    d = x.shape[1]
    logpdf = -0.5 * (d * _LOG_2PI + logdet + np.sum(sol**2, axis=-1))
    cov_inv = np.linalg.inv(cov)
    score = -np.einsum("mij,mj->mi", cov_inv, z - mean)
    return logpdf, score, cov_inv


def parametrix_rho(cfg: ParametrixConfig, theta, x: Array, z: Array, u: Array) -> Array:
    """Weight factor of one update: ``1 + (K - K_prop) m / (lambda m)`` at ``z``.

    ``K`` is the forward operator of the diffusion and ``K_prop`` that of the
    Euler proposal with coefficients frozen at ``x``; both act on the Euler
    density ``m(x, ., u)`` whose Gaussian derivatives are used in closed form.
    """
    _, g, cov_inv = _euler_logpdf_and_score(cfg, theta, x, z, u)
    dalpha = cfg.drift(theta, z) - cfg.drift(theta, x)
    gam_z = _gamma(cfg, theta, z)
    gam_x = _gamma(cfg, theta, x)
    hess = g[:, :, None] * g[:, None, :] - cov_inv
    ratio = (
        -cfg.drift_divergence(theta, z)
        - np.sum(dalpha * g, axis=1)
        + 0.5 * np.sum((gam_z - gam_x) * hess, axis=(1, 2))
    )
    if cfg.gamma_divergence is not None:
        ratio = ratio + np.sum(cfg.gamma_divergence(theta, z) * g, axis=1)
    if cfg.gamma_second is not None:
        ratio = ratio + 0.5 * cfg.gamma_second(theta, z)
    return 1.0 + ratio / cfg.intensity


def parametrix_transition_estimate(cfg: ParametrixConfig, theta, x, y, rng) -> Array:
    """Signed unbiased estimates of the transition density over ``cfg.horizon``.

    Update times follow a Poisson process of rate ``cfg.intensity``; between
    them the skeleton moves by Euler steps and its weight is multiplied by
    :func:`parametrix_rho`. The estimate is the weight times the Euler density
    from the last skeleton point to ``y`` over the remaining time.

    Raises:
        DegenerateDiffusion: ``sigma sigma^T`` is singular at a visited point.
    """
    x, y = _pair(x, y)
    m, d = x.shape
    delta = cfg.horizon
    counts, times = _poisson_times(rng, cfg.intensity, delta, m)
    cur = x.copy()
    s_prev = np.zeros(m)
    w = np.ones(m)
    for j in range(times.shape[1]):
        act = np.flatnonzero(np.isfinite(times[:, j]))
        t = times[act, j]
        ds = t - s_prev[act]
        xc = cur[act]
        eps = rng.standard_normal((act.size, d))
        sig = cfg.diffusion(theta, xc)
        xn = xc + ds[:, None] * cfg.drift(theta, xc) + np.sqrt(ds)[:, None] * np.einsum(
            "mij,mj->mi", sig, eps
        )
        w[act] *= parametrix_rho(cfg, theta, xc, xn, ds)
        cur[act] = xn
        s_prev[act] = t
    logm, _, _ = _euler_logpdf_and_score(cfg, theta, cur, y, delta - s_prev)
    return w * np.exp(logm)


def euler_transition_density(cfg: ParametrixConfig, theta, x, y, u=None) -> Array:
    """One-step Euler density ``m(x, y, u)``; ``u`` defaults to the horizon."""
    x, y = _pair(x, y)
    u = np.full(x.shape[0], cfg.horizon if u is None else u, dtype=float)
    logm, _, _ = _euler_logpdf_and_score(cfg, theta, x, y, u)
    return np.exp(logm)
