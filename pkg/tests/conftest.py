import numpy as np
import pytest

from hetpcc.geometry import PointCloud, dedupe


def random_voxels(rng, depth, n):
    vox = rng.integers(0, 1 << depth, size=(n, 3))
    return dedupe(vox, depth)


def surface_cloud(rng, n=3000, radius=20.0, center=32.0):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(np.round(v * radius + center, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
