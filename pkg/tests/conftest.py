import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rfl.instances import GenConfig, generate, illustrative_2_4
from rfl.model import PairAmbiguity

settings.register_profile(
    "rfl", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("rfl")


def random_pair(rng: np.random.Generator, n: int, b=None, gamma=None) -> PairAmbiguity:
    """A pair shaped like the generator's, with optional radius / gamma overrides."""
    q = rng.uniform(0, 1, size=(n, n))
    cov = q.T @ q
    beta = rng.uniform(0, 1, size=n)
    beta[rng.integers(n)] = rng.uniform(2, 10)
    return PairAmbiguity(
        beta_hat=beta,
        ellipsoid_shape=np.eye(n) + 0.3 * cov,
        ellipsoid_radius=rng.uniform(0.2, 3.0) if b is None else b,
        cov_hat=cov,
        gamma_lo=0.0,
        gamma_hi=rng.uniform(0.0, 0.5) if gamma is None else gamma,
    )


def crossing_pair(n: int = 2, seed: int = 0) -> PairAmbiguity:
    """Diagonal data where neither branch dominates everywhere."""
    rng = np.random.default_rng(seed)
    beta = rng.uniform(1, 5, size=n)
    return PairAmbiguity(beta, np.diag(rng.uniform(0.3, 3, size=n)), 1.0,
                         np.diag(rng.uniform(0.3, 3, size=n)), 0.0, 1.0)


@pytest.fixture
def est1():
    return illustrative_2_4("est1")


@pytest.fixture
def est2():
    return illustrative_2_4("est2")


@pytest.fixture
def small_instance():
    return generate(GenConfig(4, 2, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
