import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rcmhomog.lattice import CLOSED_BOX, TORUS, DistributionSpec, LatticeSpec, sample_environment

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


def torus_env(d, N, dist=None, seed=0):
    return sample_environment(LatticeSpec(d, N, TORUS), dist or DistributionSpec.uniform_elliptic(2), seed)


def box_env(d, N, dist=None, seed=0):
    return sample_environment(LatticeSpec(d, N, CLOSED_BOX), dist or DistributionSpec.uniform_elliptic(2), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
