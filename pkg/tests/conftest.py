import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdml.channel import ChannelParams, mean_rss

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# near-zero noise: variances must stay positive and ordered
NOISELESS = ChannelParams(-20.0, 3.0, 1e-12, -5.0, 4.0, 2e-12)
TYPICAL = ChannelParams(-15.0, 3.0, 36.0, 0.0, 4.5, 144.0)


def exact_rss(params, mode, sources, x):
    """Noise-free time averages from each source to point ``x``."""
    return np.array([mean_rss(params, mode, s, x) for s in np.atleast_2d(sources)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
