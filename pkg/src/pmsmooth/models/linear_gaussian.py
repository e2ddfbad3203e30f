"""Linear-Gaussian state space model and its exact Kalman/RTS oracle.

The particle model exposes the exact transition density as a deterministic,
positive "estimator", so every smoother in the package can be checked
against closed-form Gaussian recursions. The parameter is ``vec(A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from pmsmooth.core import DensityDraw, SsmDefinition
from pmsmooth.errors import ConfigError, SingularCovariance
from pmsmooth.models.gaussian import cholesky, mvn_logpdf, mvn_sample, require_pd


@dataclass(frozen=True)
class LinearGaussianSpec:
    """``X_{k+1} = A X_k + N(0, Q)``, ``Y_k = H X_k + N(0, R)``, ``X_0 ~ N(m0, P0)``."""

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        for name in ("A", "Q", "H", "R", "P0"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "m0", np.atleast_1d(np.asarray(self.m0, dtype=float)))
        d, m = self.A.shape[0], self.H.shape[0]
        if self.A.shape != (d, d) or self.Q.shape != (d, d) or self.H.shape != (m, d):
            raise ConfigError("inconsistent linear-Gaussian dimensions")
        if self.R.shape != (m, m) or self.P0.shape != (d, d) or self.m0.shape != (d,):
            raise ConfigError("inconsistent linear-Gaussian dimensions")
        for name in ("Q", "R"):
            cov = getattr(self, name)
            if not np.allclose(cov, cov.T):
                raise ConfigError(f"{name} must be symmetric")
            require_pd(cov, name)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    @classmethod
    def scalar(cls, a=0.9, q=0.5, h=1.0, r=1.0, m0=0.0, p0=1.0) -> "LinearGaussianSpec":
        return cls([[a]], [[q]], [[h]], [[r]], [m0], [[p0]])


@dataclass
class KalmanResult:
    filter_means: np.ndarray
    filter_covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    smooth_means: np.ndarray
    smooth_covs: np.ndarray
    loglik_increments: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.loglik_increments.sum())


def kalman_rts(spec: LinearGaussianSpec, observations) -> KalmanResult:
    """Kalman filter followed by the Rauch-Tung-Striebel smoother.

    ``loglik_increments[k]`` is ``log p(y_k | y_{0:k-1})``; the first entry
    uses the prior predictive of ``y_0``.
    """
    y = np.asarray(observations, dtype=float).reshape(-1, spec.obs_dim)
    n1, d = y.shape[0], spec.state_dim
    A, Q, H, R = spec.A, spec.Q, spec.H, spec.R
    mf = np.zeros((n1, d))
    Pf = np.zeros((n1, d, d))
    mp = np.zeros((n1, d))
    Pp = np.zeros((n1, d, d))
    ll = np.zeros(n1)
    m, P = spec.m0.copy(), spec.P0.copy()
    for k in range(n1):
        if k > 0:
            m, P = A @ m, A @ P @ A.T + Q
        mp[k], Pp[k] = m, P
        S = H @ P @ H.T + R
        try:
            Sc = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("innovation covariance is singular") from exc
        resid = y[k] - H @ m
        ll[k] = mvn_logpdf(y[k][None], (H @ m)[None], Sc)[0]
        K = np.linalg.solve(S, H @ P).T
        m = m + K @ resid
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        mf[k], Pf[k] = m, P
    ms, Ps = mf.copy(), Pf.copy()
    for k in range(n1 - 2, -1, -1):
        try:
            G = np.linalg.solve(Pp[k + 1], A @ Pf[k]).T
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("predictive covariance is singular") from exc
        ms[k] = mf[k] + G @ (ms[k + 1] - mp[k + 1])
        Ps[k] = Pf[k] + G @ (Ps[k + 1] - Pp[k + 1]) @ G.T
    return KalmanResult(mf, Pf, mp, Pp, ms, Ps, ll)


def with_theta(spec: LinearGaussianSpec, theta) -> LinearGaussianSpec:
    d = spec.state_dim
    theta = np.asarray(theta, dtype=float)
    if theta.size != d * d:
        raise ConfigError(f"theta = vec(A) needs {d * d} entries, got {theta.size}")
    return replace(spec, A=theta.reshape(d, d))


def kalman_score_fd(spec: LinearGaussianSpec, observations, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``log p(y_k | y_{0:k-1})`` in ``vec(A)``.

    Returns an array of shape ``(n + 1, d * d)``.
    """
    theta = spec.A.ravel()
    out = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        up = kalman_rts(with_theta(spec, theta + e), observations).loglik_increments
        dn = kalman_rts(with_theta(spec, theta - e), observations).loglik_increments
        out.append((up - dn) / (2 * h))
    return np.stack(out, axis=1)


def simulate_lg(spec: LinearGaussianSpec, n: int, rng):
    """Draw ``(X_{0:n}, Y_{0:n})``."""
    d, m = spec.state_dim, spec.obs_dim
    Lq, Lr, L0 = cholesky(spec.Q), cholesky(spec.R), cholesky(spec.P0)
    x = np.zeros((n + 1, d))
    y = np.zeros((n + 1, m))
    x[0] = mvn_sample(spec.m0, L0, rng)[0]
    for k in range(n + 1):
        if k > 0:
            x[k] = mvn_sample(spec.A @ x[k - 1], Lq, rng)[0]
        y[k] = mvn_sample(spec.H @ x[k], Lr, rng)[0]
    return x, y


def lg_model(spec: LinearGaussianSpec, proposal: str = "bootstrap") -> SsmDefinition:
    """Particle model of ``spec``.

    ``proposal`` is ``"bootstrap"`` (sample from the transition) or
    ``"optimal"`` (the exact conditional law of ``X_{k+1}`` given ``X_k`` and
    ``Y_{k+1}``).
    """
    d, m = spec.state_dim, spec.obs_dim
    A, H = spec.A, spec.H
    Lq, Lr, L0 = cholesky(spec.Q), cholesky(spec.R), cholesky(spec.P0)
    Qi = np.linalg.inv(spec.Q)
    Ri = np.linalg.inv(spec.R)

    def trans_logpdf(x, xn):
        return mvn_logpdf(xn, x @ A.T, Lq)

    def estimator(k, x, xn, rng):
        return DensityDraw(np.exp(trans_logpdf(x, xn)))

    def grad_log_trans(k, x, xn, rng):
        r = (xn - x @ A.T) @ Qi.T
        return np.einsum("mi,mj->mij", r, x).reshape(x.shape[0], d * d)

    def obs_density(k, x, y):
        return np.exp(mvn_logpdf(np.broadcast_to(y, (x.shape[0], m)), x @ H.T, Lr))

    if proposal == "bootstrap":

        def prop_sample(k, x, y, rng):
            return mvn_sample(x @ A.T, Lq, rng)

        def prop_density(k, x, xn, y):
            return np.exp(trans_logpdf(x, xn))

    elif proposal == "optimal":
        C = np.linalg.inv(Qi + H.T @ Ri @ H)
        Lc = cholesky(C)

        def _mean(x, y):
            return (x @ A.T @ Qi.T + (H.T @ Ri @ y)[None]) @ C.T

        def prop_sample(k, x, y, rng):
            return mvn_sample(_mean(x, y), Lc, rng)

        def prop_density(k, x, xn, y):
            return np.exp(mvn_logpdf(xn, _mean(x, y), Lc))

    else:
        raise ConfigError(f"unknown proposal {proposal!r}")

    return SsmDefinition(
        state_dim=d,
        obs_dim=m,
        param_dim=d * d,
        initial_sampler=lambda n, rng: mvn_sample(spec.m0, L0, rng, n),
        initial_density_ratio=lambda x: np.ones(x.shape[0]),
        proposal_sampler=prop_sample,
        proposal_density=prop_density,
        obs_density=obs_density,
        transition_estimator=estimator,
        transition_estimator_is_positive=True,
        obs_density_grad=lambda k, x, y: np.zeros((x.shape[0], d * d)),
        grad_log_transition_estimator=grad_log_trans,
        transition_bound=lambda k, src, xn: np.full(
            np.atleast_2d(xn).shape[0], np.exp(mvn_logpdf(np.zeros((1, d)), np.zeros((1, d)), Lq))[0]
        ),
        name="linear_gaussian",
    )


def lg_family(spec: LinearGaussianSpec, proposal: str = "bootstrap"):
    """Map ``theta = vec(A)`` to the particle model."""
    return lambda theta: lg_model(with_theta(spec, theta), proposal)
