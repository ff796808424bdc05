import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgconnection.connection import Lab
from kgconnection.geometry import GridSpec, PerturbationSpec

settings.register_profile(
    "kg", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("kg")


def bump_spec(kind="conformal_bump", t0=0.0, x0=0.0, r=(1.5, 4.0), amp=0.1, sharp=(1.0, 8.0)):
    return PerturbationSpec(kind, (t0, x0), r, amp, sharp)


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def lab():
    return Lab()


@pytest.fixture(scope="session")
def conformal():
    return (bump_spec(),)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
