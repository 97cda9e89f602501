import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cyclematch.geometry import PointCloud

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cloud(rng, n=48, with_ids=True):
    pts = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, np.arange(n) if with_ids else None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cloud(rng):
    return random_cloud(rng)
