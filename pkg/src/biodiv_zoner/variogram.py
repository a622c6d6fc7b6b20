"""Empirical trace-variogram of fitted profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import BasisMismatch
from .smoothing import BasisSystem, SmoothedProfile, curves_on


def pairwise_distances(centroids) -> np.ndarray:
    """Euclidean distance matrix between cell centroids."""
    c = np.asarray(centroids, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("need at least two centroids")
    return squareform(pdist(c))


def _integrate_sq(diff, ddiff, grid):
    """Row-wise ``int diff^2`` with the Euler-Maclaurin end correction."""
    g = diff * diff
    dg = 2.0 * diff * ddiff
    h = np.diff(grid)
    return 0.5 * (g[:, 1:] + g[:, :-1]) @ h + (dg[:, :-1] - dg[:, 1:]) @ (h * h / 12.0)


def profile_l2_distance(a: SmoothedProfile, b: SmoothedProfile, grid=None) -> float:
    """``int_0^Q (H_a(q) - H_b(q))^2 dq`` for two profiles on the same basis.

    ``grid`` defaults to the shared basis quadrature grid.
    """
    if not a.basis.same_as(b.basis):
        raise BasisMismatch("profiles were fitted on different bases")
    basis = a.basis
    g = basis.grid if grid is None else np.asarray(getattr(grid, "q", grid), dtype=float)
    d = a(g) - b(g)
    dd = a(g, 1) - b(g, 1)
    return float(max(_integrate_sq(d[None, :], dd[None, :], g)[0], 0.0))


@dataclass
class EmpiricalVariogram:
    """Binned semivariances; ``semivariance`` is NaN for empty bins."""

    lag_centers: np.ndarray
    semivariance: np.ndarray
    pair_counts: np.ndarray
    bin_edges: np.ndarray

    def nonempty(self):
        k = self.pair_counts > 0
        return self.lag_centers[k], self.semivariance[k]


def default_lag_edges(distances: np.ndarray, width: float) -> np.ndarray:
    """Lag classes of ``width`` centred on multiples of ``width``, up to half the max distance."""
    hmax = 0.5 * float(np.max(distances))
    n = max(int(np.floor(hmax / width + 1e-9)), 1)
    return width * (np.arange(n + 1) + 0.5)


def trace_variogram(
    profiles: list[SmoothedProfile] | np.ndarray,
    centroids,
    bins=None,
    basis: BasisSystem | None = None,
    width: float | None = None,
) -> EmpiricalVariogram:
    """Omni-directional empirical trace-variogram.

    ``profiles`` is either a list of :class:`SmoothedProfile` or an array of
    curves already evaluated on ``basis.grid`` (then ``basis`` is required and
    a plain trapezoid rule is used). ``bins`` are explicit lag-class edges; by
    default classes have the width of the smallest nonzero distance (the cell
    size on a lattice) and reach half the largest distance.
    """
    c = np.asarray(centroids, dtype=float)
    if len(profiles) != c.shape[0] or c.shape[0] < 2:
        raise ValueError("need one centroid per profile and at least two profiles")
    D = pairwise_distances(c)

    if isinstance(profiles, np.ndarray):
        if basis is None:
            raise ValueError("basis required when passing evaluated curves")
        grid = basis.grid
        F = profiles
        dF = None
    else:
        basis = profiles[0].basis
        for p in profiles[1:]:
            if not p.basis.same_as(basis):
                raise BasisMismatch("profiles were fitted on different bases")
        grid = basis.grid
        F = curves_on(profiles, basis)
        dF = curves_on(profiles, basis, derivative_order=1)

    if bins is None:
        if width is None:
            pos = D[D > 0]
            width = float(pos.min())
        edges = default_lag_edges(D, width)
    else:
        edges = np.asarray(bins, dtype=float)

    n = F.shape[0]
    nb = edges.size - 1
    sums = np.zeros(nb)
    counts = np.zeros(nb, dtype=np.int64)
    # trapezoid weights for pre-evaluated curves
    hq = np.diff(grid)
    w = np.r_[0.0, hq] * 0.5 + np.r_[hq, 0.0] * 0.5
    for i in range(n - 1):
        h = D[i, i + 1:]
        k = np.searchsorted(edges, h, side="right") - 1
        ok = (k >= 0) & (k < nb)
        if not np.any(ok):
            continue
        diff = F[i + 1:][ok] - F[i]
        if dF is None:
            l2 = (diff * diff) @ w
        else:
            l2 = _integrate_sq(diff, dF[i + 1:][ok] - dF[i], grid)
        np.add.at(sums, k[ok], np.maximum(l2, 0.0))
        np.add.at(counts, k[ok], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, 0.5 * sums / np.maximum(counts, 1), np.nan)
    # report the mean distance actually observed in each class
    centers = 0.5 * (edges[:-1] + edges[1:])
    iu = np.triu_indices(n, 1)
    hs = D[iu]
    kk = np.searchsorted(edges, hs, side="right") - 1
    okk = (kk >= 0) & (kk < nb)
    hsum = np.bincount(kk[okk], weights=hs[okk], minlength=nb)
    centers = np.where(counts > 0, hsum / np.maximum(counts, 1), centers)
    return EmpiricalVariogram(centers, gamma, counts, edges)
