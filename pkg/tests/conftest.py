import os
import sys

import numpy as np
import pytest

from pmsmooth import DensityDraw, SsmDefinition
from pmsmooth.models import LinearGaussianSpec, lg_model, simulate_lg

sys.path.insert(0, os.path.dirname(__file__))


def z_score(samples, target):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return (samples.mean() - target) / se


def toy_model(estimator, positive, state_dim=1, obs_density=None, bound=None):
    """Bare model around a custom transition estimator.

    Proposal and initial law are standard normals with unit density ratio,
    so weights are driven by the estimator alone.
    """

    def prop_sample(k, x, y, rng):
        return rng.standard_normal(x.shape)

    return SsmDefinition(
        state_dim=state_dim,
        obs_dim=1,
        param_dim=1,
        initial_sampler=lambda n, rng: rng.standard_normal((n, state_dim)),
        initial_density_ratio=lambda x: np.ones(x.shape[0]),
        proposal_sampler=prop_sample,
        proposal_density=lambda k, x, xn, y: np.ones(x.shape[0]),
        obs_density=obs_density or (lambda k, x, y: np.ones(x.shape[0])),
        transition_estimator=estimator,
        transition_estimator_is_positive=positive,
        transition_bound=bound,
    )


def signed_mock(p_plus=0.7, plus=3.0, minus=-1.0):
    """Estimator ignoring the states: ``plus`` w.p. ``p_plus`` else ``minus``."""

    def est(k, x, xn, rng):
        u = rng.random(x.shape[0])
        return DensityDraw(np.where(u < p_plus, plus, minus))

    return est


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def lg_spec():
    return LinearGaussianSpec.scalar(a=0.9, q=0.5, h=1.0, r=1.0)


@pytest.fixture(scope="session")
def lg_data(lg_spec):
    x, y = simulate_lg(lg_spec, 20, np.random.default_rng(5))
    return x, y


@pytest.fixture(scope="session")
def lg_boot(lg_spec):
    return lg_model(lg_spec, "bootstrap")
