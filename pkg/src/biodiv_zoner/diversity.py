"""Hill numbers, classical diversity indices and raw biodiversity profiles."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, EmptyCell

#: Half-width of the window around q = 1 where the Shannon limit is used.
SHANNON_WINDOW = 1e-8


def relative_abundance(counts) -> np.ndarray:
    """Proportions of the species present in a community.

    ``counts`` may be a ``{species: count}`` mapping or an array. Zero
    counts are dropped.
    """
    if isinstance(counts, Mapping):
        values = [counts[k] for k in sorted(counts)]
    else:
        values = counts
    c = np.asarray(values, dtype=float).ravel()
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("counts must be finite and non-negative")
    c = c[c > 0]
    if c.size == 0:
        raise EmptyCell("community has no individuals")
    return c / c.sum()


def _as_simplex(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).ravel()
    p = p[p > 0]
    if p.size == 0:
        raise EmptyCell("empty abundance vector")
    return p


def shannon_entropy(p) -> float:
    p = _as_simplex(p)
    return float(-np.sum(p * np.log(p)))


def gini_simpson(p) -> float:
    p = _as_simplex(p)
    return float(1.0 - np.sum(p * p))


def hill_number(p, q: float) -> float:
    r"""Effective number of species of order ``q``.

    .. math::

       H(q) = \Bigl(\sum_s p_s^q\Bigr)^{1/(1-q)}

    with the exponential of Shannon entropy for ``q`` within
    :data:`SHANNON_WINDOW` of 1. Richness (``q = 0``) is returned exactly as
    the number of species present.
    """
    p = _as_simplex(p)
    q = float(q)
    if not np.isfinite(q) or q < 0:
        raise ValueError(f"order q must be finite and non-negative, got {q}")
    if q == 0:
        return float(p.size)
    if abs(q - 1.0) < SHANNON_WINDOW:
        return float(np.exp(-np.sum(p * np.log(p))))
    return float(np.exp(_log_hill(p, q)))


def _log_hill(p: np.ndarray, q: float) -> float:
    # sum p^q = sum p * exp((q-1) log p); log1p/expm1 keep precision as q -> 1
    lp = np.log(p)
    if abs(q - 1.0) < 0.5:
        s = np.sum(p * np.expm1((q - 1.0) * lp))
        return float(np.log1p(s) / (1.0 - q))
    a = q * lp
    m = a.max()
    return float((m + np.log(np.sum(np.exp(a - m)))) / (1.0 - q))


def hill_profile(p, q) -> np.ndarray:
    """Vectorised :func:`hill_number` over an array of orders.

    The true profile is non-increasing in ``q``. Near-even communities can
    show one-ulp upward steps from rounding, so values are passed through a
    running minimum in order of increasing ``q``; this moves no value by
    more than its own rounding error.
    """
    p = _as_simplex(p)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    h = np.array([hill_number(p, qq) for qq in q])
    order = np.argsort(q, kind="stable")
    h[order] = np.minimum.accumulate(h[order])
    return h


@dataclass(frozen=True)
class QGrid:
    """Increasing grid of orders starting at 0 and containing 1."""

    q: np.ndarray
    Q: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size < 2:
            raise BadConfig("q grid needs at least two points")
        if q[0] != 0.0 or np.any(np.diff(q) <= 0) or q[-1] > self.Q + 1e-12:
            raise BadConfig("q grid must start at 0, increase strictly and stay within [0, Q]")
        if not np.any(np.abs(q - 1.0) < 1e-12):
            raise BadConfig("q grid must include q = 1")
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, Q: float = 5.0, n_points: int = 101) -> QGrid:
        q = np.linspace(0.0, Q, n_points)
        # snap the node nearest 1 exactly onto 1
        k = int(np.argmin(np.abs(q - 1.0)))
        if abs(q[k] - 1.0) > 1e-9:
            raise BadConfig(f"{n_points} uniform points on [0, {Q}] do not hit q = 1")
        q[k] = 1.0
        return cls(q, float(Q))

    def __len__(self):
        return self.q.size


def default_qgrid() -> QGrid:
    """101 points on [0, 5] (step 0.05)."""
    return QGrid.uniform(5.0, 101)


@dataclass(frozen=True)
class ProfilePoints:
    grid: QGrid
    h: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return self.grid.q

    @property
    def richness(self) -> int:
        return int(round(self.h[0]))

    def is_constant(self, tol: float = 1e-6) -> bool:
        return bool(self.h.max() - self.h.min() < tol)


def profile_points(p, grid: QGrid | None = None) -> ProfilePoints:
    grid = default_qgrid() if grid is None else grid
    return ProfilePoints(grid, hill_profile(p, grid.q))


def profile_crossing(p1, p2, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Locate an order in ``[lo, hi]`` where two profiles cross, by bisection.

    Raises ``ValueError`` if the profile difference has the same sign at
    both ends.
    """
    f = lambda q: hill_number(p1, q) - hill_number(p2, q)  # noqa: E731
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ValueError("profiles do not cross on the bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cell_profiles(grid_counts: np.ndarray, qgrid: QGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hill profiles for every occupied row of an ``(N, S)`` count matrix.

    Returns ``(cell_ids, H)`` with ``H`` of shape ``(n_occupied, len(qgrid))``.
    """
    qgrid = default_qgrid() if qgrid is None else qgrid
    counts = np.asarray(grid_counts)
    ids = np.flatnonzero(counts.sum(axis=1) > 0)
    H = np.empty((ids.size, len(qgrid)))
    for r, i in enumerate(ids):
        H[r] = hill_profile(relative_abundance(counts[i]), qgrid.q)
    return ids, H
