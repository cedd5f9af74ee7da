import numpy as np
import pytest

from neurovox.volume import Units, Volume, VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return VoxelGrid.from_spacing((8, 9, 7), (1.0, 1.5, 2.0))


@pytest.fixture
def small_volume(small_grid, rng):
    return Volume(small_grid, rng.normal(size=small_grid.dims), Units.DIMENSIONLESS)
