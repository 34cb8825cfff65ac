import numpy as np
import pytest

from corticarve.volume import BinaryMask, Grid, ScalarVolume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_grid(dims, spacing=1.0, origin=(0.0, 0.0, 0.0)):
    return Grid.isotropic(tuple(dims), spacing, origin)


def random_boundary_mask(rng, dims, p=0.4, spacing=1.0):
    """Random mask guaranteed to have both classes."""
    while True:
        data = rng.random(tuple(dims)) < p
        if data.any() and not data.all():
            return BinaryMask(make_grid(dims, spacing), data)


def sphere_mask(dims, center, radius, spacing=1.0):
    grid = make_grid(dims, spacing)
    idx = np.indices(tuple(dims)).astype(np.float64)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return BinaryMask(grid, d2 <= radius * radius)


def scalar_vol(data, spacing=1.0):
    data = np.asarray(data, dtype=np.float64)
    return ScalarVolume(make_grid(data.shape, spacing), data)
