"""Thin-plate-spline bending-energy eigenbasis for spatial log-odds.

The bending-energy matrix ``B`` of the kernel ``h^2 log(h) / (8 pi)`` with
affine design ``U = [1, x, y]`` annihilates ``U``. Its eigenvectors ordered
by increasing eigenvalue go from the affine trend (three null directions)
to progressively rougher spatial patterns; the leading ``L`` of them are
the regressors of the mixing-proportion model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DuplicateSites, EigenFailure, SingularV


@dataclass(frozen=True)
class SiteSet:
    coordinates: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coordinates, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError("coordinates must be an (N, 2) array")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise DuplicateSites("duplicate site coordinates")
        object.__setattr__(self, "coordinates", c)
        if np.linalg.matrix_rank(self.U) < 3:
            raise ValueError("sites are collinear; affine design is rank deficient")

    @property
    def U(self) -> np.ndarray:
        c = self.coordinates
        return np.column_stack([np.ones(c.shape[0]), c])

    def __len__(self):
        return self.coordinates.shape[0]


def tps_kernel(h):
    """``h^2 log(h) / (8 pi)`` with the continuous value 0 at ``h = 0``."""
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    pos = h > 0
    out[pos] = h[pos] ** 2 * np.log(h[pos]) / (8.0 * np.pi)
    return out


def tps_variogram_matrix(sites: SiteSet) -> np.ndarray:
    c = sites.coordinates
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    V = tps_kernel(d)
    return 0.5 * (V + V.T)


def bending_energy(V: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``B = V^-1 - V^-1 U (U' V^-1 U)^-1 U' V^-1``.

    ``V`` is factorised once; if the factorisation fails or is badly
    conditioned a ridge ``eps * I`` is added, with ``eps`` stepping from 1e-10
    to 1e-6 (relative to the mean absolute entry of ``V``).
    """
    n = V.shape[0]
    scale = float(np.mean(np.abs(V))) or 1.0
    for eps in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        Vr = V + eps * scale * np.eye(n) if eps else V
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", linalg.LinAlgWarning)
                lu = linalg.lu_factor(Vr, check_finite=True)
                ViU = linalg.lu_solve(lu, U)
                Vi = linalg.lu_solve(lu, np.eye(n))
                M = U.T @ ViU
                B = Vi - ViU @ linalg.solve(M, ViU.T, assume_a="sym")
        except (linalg.LinAlgError, linalg.LinAlgWarning, ValueError):
            continue
        if np.all(np.isfinite(B)):
            return 0.5 * (B + B.T)
    raise SingularV("variogram matrix could not be inverted even with ridge 1e-6")


def bending_energy_projected(V: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Same matrix via ``Z (Z' V Z)^-1 Z'`` with ``Z`` an orthonormal complement of ``U``."""
    Qf, _ = np.linalg.qr(U, mode="complete")
    Z = Qf[:, U.shape[1]:]
    B = Z @ linalg.solve(Z.T @ V @ Z, Z.T, assume_a="sym")
    return 0.5 * (B + B.T)


@dataclass
class SpatialBasis:
    """Leading ``L`` eigenvectors of the bending-energy matrix.

    ``psi`` is ``(N, L)`` with orthonormal columns; ``eigenvalues`` holds all
    ``N`` eigenvalues in ascending order of magnitude (the first three are
    the affine null space).
    """

    psi: np.ndarray
    eigenvalues: np.ndarray
    L: int
    explained_fraction: float

    @property
    def n_sites(self) -> int:
        return self.psi.shape[0]


def explained_variability(g, L: int) -> float:
    """Share of the thin-plate prior variance captured by the first ``L`` functions.

    The prior covariance is a generalised inverse of ``B``, so direction
    ``l`` carries variance ``1 / g_l``. The three affine directions are
    always included and excluded from both sums.
    """
    g = np.asarray(g, dtype=float)
    inv = 1.0 / g[3:]
    total = inv.sum()
    if L <= 3:
        return 0.0
    return float(inv[: L - 3].sum() / total)


def _orient(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def kl_basis(B: np.ndarray, L: int | None = None, U: np.ndarray | None = None,
             target_fraction: float | None = None) -> SpatialBasis:
    """Eigen-decompose ``B`` and keep the smoothest ``L`` directions.

    Exactly one of ``L`` and ``target_fraction`` should be given; with a
    target the smallest ``L`` reaching it is used. When ``U`` is supplied the
    three null directions are replaced by an orthonormalisation of its
    columns, giving a constant ``psi_1`` and trends in x and y for ``psi_2``
    and ``psi_3``. Eigenvector signs are fixed so the largest-magnitude entry
    is positive (trend columns increase with their coordinate).
    """
    n = B.shape[0]
    try:
        g, vecs = linalg.eigh(0.5 * (B + B.T))
    except linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    order = np.argsort(np.abs(g), kind="stable")
    g = g[order]
    vecs = vecs[:, order]

    if U is not None:
        Qu, Ru = np.linalg.qr(U)
        # flip columns so each trend direction increases with its coordinate
        Qu = Qu * np.sign(np.diag(Ru))
        vecs = np.column_stack([Qu, vecs[:, 3:]])
        start = 3
    else:
        start = 0
    for j in range(start, n):
        vecs[:, j] = _orient(vecs[:, j])

    if target_fraction is not None:
        if L is not None:
            raise ValueError("give either L or target_fraction, not both")
        L = 3
        while L < n and explained_variability(g, L) < target_fraction:
            L += 1
    if L is None:
        raise ValueError("L or target_fraction is required")
    if not 1 <= L <= n:
        raise ValueError(f"L must be in [1, {n}]")
    return SpatialBasis(vecs[:, :L].copy(), g, int(L), explained_variability(g, L))


def spatial_basis_for_sites(coordinates, L: int | None = 16, target_fraction: float | None = None) -> SpatialBasis:
    """Convenience: sites -> kernel -> bending energy -> truncated eigenbasis."""
    sites = SiteSet(np.asarray(coordinates, dtype=float))
    V = tps_variogram_matrix(sites)
    B = bending_energy(V, sites.U)
    if target_fraction is not None:
        L = None
    return kl_basis(B, L, sites.U, target_fraction)
