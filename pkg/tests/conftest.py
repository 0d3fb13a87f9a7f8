import numpy as np
import pytest

from tiltlab.mixtures import GaussianMixture, NoiseSchedule


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def std_normal_1d():
    return GaussianMixture(weights=[1.0], means=[[0.0]], covs=[[[1.0]]])


@pytest.fixture(scope="session")
def bimodal_1d():
    return GaussianMixture(
        weights=[0.5, 0.5],
        means=[[-3.0], [3.0]],
        covs=[[[0.25]], [[0.25]]],
    )


@pytest.fixture(scope="session")
def skew_bimodal_1d():
    return GaussianMixture(
        weights=[0.3, 0.7],
        means=[[-1.5], [2.0]],
        covs=[[[0.5]], [[1.2]]],
    )


@pytest.fixture(scope="session")
def gm_2d():
    return GaussianMixture(
        weights=[0.4, 0.6],
        means=[[-2.0, 1.0], [1.5, -0.5]],
        covs=[
            [[0.8, 0.3], [0.3, 0.5]],
            [[1.2, -0.4], [-0.4, 0.9]],
        ],
    )


def central_diff(fn, x, h=1e-6):
    """Central finite differences of a scalar function over a vector input."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def random_mixture(rng, d, m):
    w = rng.uniform(0.2, 1.0, size=m)
    w /= w.sum()
    means = rng.normal(scale=2.0, size=(m, d))
    covs = np.empty((m, d, d))
    for i in range(m):
        a = rng.normal(size=(d, d))
        covs[i] = a @ a.T + 0.3 * np.eye(d)
    return GaussianMixture(weights=w, means=means, covs=covs)
