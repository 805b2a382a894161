import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def env0():
    from homlab.environ import trivial_environment

    return trivial_environment(3)


@pytest.fixture(scope="session")
def env05():
    from homlab.environ import EnvSpec, sample_environment

    return sample_environment(EnvSpec(eta=0.05, seed=7))


@pytest.fixture
def origin():
    return np.zeros(3)
