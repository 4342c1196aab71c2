import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geosod.pcio import PointCloud

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cloud(n, seed=0, mask=True, saliency=False):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-2, 2, size=(n, 3)).astype(np.float32).astype(np.float64)
    col = rng.integers(0, 256, size=(n, 3)) / 255.0
    gt = rng.integers(0, 2, size=n).astype(np.uint8) if mask else None
    sal = rng.uniform(0, 1, size=n).astype(np.float32).astype(np.float64) if saliency else None
    return PointCloud(pos, col, gt, sal)


@pytest.fixture
def cloud():
    return random_cloud(200, seed=3)
