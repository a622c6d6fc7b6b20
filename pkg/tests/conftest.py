import numpy as np
import pytest

from biodiv_zoner.census import GridSpec
from biodiv_zoner.smoothing import BasisSystem
from biodiv_zoner.spatial_basis import spatial_basis_for_sites


@pytest.fixture(scope="session")
def basis():
    return BasisSystem(15, 5.0, 3, 501)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(nx=10, ny=14)


@pytest.fixture(scope="session")
def small_psi(small_grid):
    return spatial_basis_for_sites(small_grid.centroids(), 16).psi


def random_simplex(rng, s_max=20):
    S = int(rng.integers(1, s_max + 1))
    return rng.dirichlet(np.full(S, rng.uniform(0.2, 3.0)))
