import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vipflow.diffusion import DiffusionSchedule, GMMPrior

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sched():
    return DiffusionSchedule.linear()


def random_prior(rng, shape, K, var_range=(0.01, 0.2)):
    w = rng.random(K) + 0.2
    return GMMPrior(w / w.sum(), rng.uniform(0.2, 0.8, (K, *shape)), rng.uniform(*var_range, K))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
