import hypothesis
import numpy as np
import pytest

from jitterfit.geo import AdminRegion

# CI boxes here are timing-noisy; property tests are all cheap numerics.
hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("default")


@pytest.fixture
def unit_square():
    return AdminRegion("sq", [np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)])


@pytest.fixture
def big_square():
    s = 1e6
    return AdminRegion("plane-ish", [np.array([[-s, -s], [s, -s], [s, s], [-s, s]])])
