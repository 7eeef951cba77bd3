import numpy as np
import pytest

from dualfilter.hmm import HmmModel, Spaces


def make_model(mu, A, C, T):
    mu = np.asarray(mu, dtype=float)
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    return HmmModel(Spaces(d=len(mu), m=C.shape[1] - 1, T=T), mu, A, C)


def random_model(rng, d, m, T):
    """Dirichlet rows: strictly positive entries, so every path has positive probability."""
    return make_model(
        rng.dirichlet(np.ones(d)),
        rng.dirichlet(np.ones(d), size=d),
        rng.dirichlet(np.ones(m + 1), size=d),
        T,
    )


def uninformative_model(rng, d, m, T):
    """Emission rows all uniform: observations carry no information about the state."""
    C = np.full((d, m + 1), 1.0 / (m + 1))
    return make_model(rng.dirichlet(np.ones(d)), rng.dirichlet(np.ones(d), size=d), C, T)


@pytest.fixture
def reference_model():
    """Two states, binary tokens, horizon 3; sticky chain with informative emissions."""
    return make_model(
        mu=[0.5, 0.5],
        A=[[0.9, 0.1], [0.1, 0.9]],
        C=[[0.2, 0.8], [0.7, 0.3]],
        T=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
