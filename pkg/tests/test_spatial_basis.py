import numpy as np
import pytest

from biodiv_zoner.census import GridSpec
from biodiv_zoner.errors import DuplicateSites
from biodiv_zoner.spatial_basis import (
    SiteSet,
    bending_energy,
    bending_energy_projected,
    explained_variability,
    kl_basis,
    spatial_basis_for_sites,
    tps_kernel,
    tps_variogram_matrix,
)

TPS_2 = 0.1103178000763257967  # 4 ln 2 / (8 pi), mpmath


@pytest.fixture(scope="module")
def grid_sites():
    return SiteSet(GridSpec(nx=10, ny=14).centroids())


@pytest.fixture(scope="module")
def grid_B(grid_sites):
    return bending_energy(tps_variogram_matrix(grid_sites), grid_sites.U)


def test_kernel_values():
    np.testing.assert_allclose(tps_kernel([0.0, 1.0]), [0.0, 0.0])
    assert tps_kernel(2.0) == pytest.approx(TPS_2, rel=1e-15)


def test_duplicate_sites():
    with pytest.raises(DuplicateSites):
        SiteSet(np.array([[0, 0], [1, 0], [0, 1], [0, 0.0]]))


def test_annihilation(grid_sites, grid_B):
    assert np.abs(grid_B @ grid_sites.U).max() < 1e-8 * np.abs(grid_B).max()


def test_unit_square_rank():
    s = SiteSet(np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]]))
    B = bending_energy(tps_variogram_matrix(s), s.U)
    np.testing.assert_allclose(B, B.T)
    g = np.linalg.eigvalsh(B)
    assert np.sum(np.abs(g) > 1e-8 * np.abs(g).max()) == 1


def test_projected_form_agrees(grid_sites, grid_B):
    alt = bending_energy_projected(tps_variogram_matrix(grid_sites), grid_sites.U)
    assert np.abs(alt - grid_B).max() < 1e-8 * np.abs(grid_B).max()


def test_three_null_eigenvalues(grid_B):
    g = np.sort(np.abs(np.linalg.eigvalsh(grid_B)))
    assert np.sum(g < 1e-8) == 3


def test_basis_structure(grid_sites, grid_B):
    sb = kl_basis(grid_B, 16, grid_sites.U)
    psi = sb.psi
    np.testing.assert_allclose(psi.T @ psi, np.eye(16), atol=1e-8)
    assert np.ptp(psi[:, 0]) < 1e-12
    X = grid_sites.U
    for j in (1, 2):
        coef, *_ = np.linalg.lstsq(X, psi[:, j], rcond=None)
        resid = psi[:, j] - X @ coef
        r2 = 1 - resid @ resid / np.sum((psi[:, j] - psi[:, j].mean()) ** 2)
        assert r2 > 1 - 1e-8
    # trend columns point along increasing x and y
    assert np.corrcoef(psi[:, 1], X[:, 1])[0, 1] > 0.99
    assert np.corrcoef(psi[:, 2], X[:, 2])[0, 1] > 0.99


def test_reconstruction(grid_sites, grid_B):
    sb = kl_basis(grid_B, len(grid_sites), grid_sites.U)
    rec = sb.psi @ np.diag(sb.eigenvalues) @ sb.psi.T
    assert np.linalg.norm(rec - grid_B) < 1e-6 * np.linalg.norm(grid_B)


def test_roughness_ordering(grid_B, grid_sites):
    spec = GridSpec(nx=10, ny=14)
    sb = kl_basis(grid_B, 40, grid_sites.U)
    ids = np.arange(spec.n_cells)
    ix, iy = ids % spec.nx, ids // spec.nx
    pairs = [(i, i + 1) for i in ids if ix[i] < spec.nx - 1] + [(i, i + spec.nx) for i in ids if iy[i] < spec.ny - 1]
    a, b = np.array(pairs).T
    rough = ((sb.psi[a] - sb.psi[b]) ** 2).sum(axis=0)[3:]
    # statistically increasing: strong rank correlation with the index
    ranks = np.argsort(np.argsort(rough))
    assert np.corrcoef(ranks, np.arange(rough.size))[0, 1] > 0.8


def test_explained_variability(grid_B):
    g = np.sort(np.abs(np.linalg.eigvalsh(grid_B)))
    n = g.size
    assert explained_variability(g, n) == pytest.approx(1.0)
    assert explained_variability(g, 3) == 0.0
    vals = [explained_variability(g, L) for L in range(3, n + 1)]
    assert np.all(np.diff(vals) >= 0)


def test_target_fraction(grid_sites):
    sb = spatial_basis_for_sites(grid_sites.coordinates, target_fraction=0.9)
    assert sb.explained_fraction >= 0.9
    assert explained_variability(sb.eigenvalues, sb.L - 1) < 0.9
