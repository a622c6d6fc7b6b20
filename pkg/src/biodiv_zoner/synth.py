"""Synthetic spatially clustered communities with known truth.

All draws come from numpy's ``Philox`` counter-based generator (4x64, 10
rounds) keyed by the scenario seed, so a seed reproduces the same labels,
coefficients and counts on any platform. Independent streams for labels,
coefficients and abundances are obtained with ``SeedSequence.spawn``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .census import AbundanceGrid, GridSpec
from .errors import BadConfig, LengthMismatch


def philox(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _streams(seed: int):
    labels, coefs, counts = np.random.SeedSequence(seed).spawn(3)
    return philox(labels), philox(coefs), philox(counts)


@dataclass(frozen=True)
class SpeciesPool:
    """Relative abundances of the species a cluster draws from."""

    species: tuple
    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if len(self.species) != p.size or p.size == 0:
            raise BadConfig("species pool needs one probability per species")
        if np.any(p < 0) or not p.sum() > 0:
            raise BadConfig("species probabilities must be non-negative with positive sum")
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "probs", tuple(float(v) for v in p / p.sum()))

    @classmethod
    def from_dict(cls, d) -> SpeciesPool:
        return cls(tuple(d["species"]), tuple(d["probs"]))

    def to_dict(self) -> dict:
        return {"species": list(self.species), "probs": list(self.probs)}


def default_pools() -> list[SpeciesPool]:
    """Three pools with clearly different profile shapes.

    An even mix of eight common species (high, flat profile), a community
    dominated by one species (steep early drop) and a geometric series in
    between. Each pool has a tail of rare species so that richness varies
    from cell to cell instead of being fixed within a cluster.
    """
    rare = lambda start, n, w: [(f"sp{start + j:02d}", w) for j in range(n)]  # noqa: E731
    even = [(f"sp{j:02d}", 1.0) for j in range(8)] + rare(20, 6, 0.06)
    dom = [("sp00", 14.0)] + [(f"sp{j:02d}", 0.5) for j in range(8, 12)] + rare(26, 6, 0.1)
    geo = [(f"sp{12 + j:02d}", 0.55 ** j) for j in range(8)]
    return [SpeciesPool(tuple(s for s, _ in pool), tuple(w for _, w in pool)) for pool in (even, dom, geo)]


@dataclass
class SyntheticScenario:
    """Ground truth for a synthetic zoning problem.

    ``layout`` is ``"blocks"`` (clusters occupy contiguous bands along y,
    or the explicit ``block_labels``) or ``"omega"`` (labels drawn from the
    spatial logit with coefficients ``omega`` on an ``L``-term basis).
    ``means``/``covariances`` describe cluster distributions in coefficient
    space; when omitted, cluster ``k`` has mean ``separation * sigma`` on
    coordinate ``k`` and covariance ``sigma^2 I``.
    """

    spec: GridSpec = field(default_factory=lambda: GridSpec(nx=10, ny=14))
    K: int = 3
    layout: str = "blocks"
    block_labels: np.ndarray | None = None
    omega: np.ndarray | None = None
    L: int = 16
    p: int = 17
    separation: float = 4.0
    sigma: float = 1.0
    means: np.ndarray | None = None
    covariances: np.ndarray | None = None
    pools: list = field(default_factory=default_pools)
    mean_total: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise BadConfig("K must be positive")
        if self.layout not in ("blocks", "omega"):
            raise BadConfig(f"unknown layout {self.layout!r}")
        if self.means is None:
            if self.K > self.p:
                raise BadConfig("default means need K <= p")
            m = np.zeros((self.K, self.p))
            for k in range(self.K):
                m[k, k] = self.separation * self.sigma
            self.means = m
        self.means = np.asarray(self.means, dtype=float).reshape(self.K, -1)
        self.p = self.means.shape[1]
        if self.covariances is None:
            self.covariances = np.repeat((self.sigma ** 2 * np.eye(self.p))[None], self.K, axis=0)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(self.K, self.p, self.p)
        for k, S in enumerate(self.covariances):
            if np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 0:
                raise BadConfig(f"covariance of cluster {k} is not positive definite")
        if self.block_labels is not None:
            self.block_labels = np.asarray(self.block_labels, dtype=int)
            if self.block_labels.size != self.spec.n_cells:
                raise BadConfig("block_labels needs one label per cell")
        if self.layout == "omega":
            if self.omega is None:
                raise BadConfig("layout 'omega' requires omega")
            self.omega = np.asarray(self.omega, dtype=float).reshape(self.K - 1, -1)
            self.L = self.omega.shape[1]
        self.pools = [p if isinstance(p, SpeciesPool) else SpeciesPool.from_dict(p) for p in self.pools]

    @property
    def n_cells(self) -> int:
        return self.spec.n_cells

    def to_dict(self) -> dict:
        d = {
            "grid": self.spec.to_dict(),
            "K": self.K,
            "layout": self.layout,
            "L": self.L,
            "separation": self.separation,
            "sigma": self.sigma,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "pools": [p.to_dict() for p in self.pools],
            "mean_total": self.mean_total,
            "seed": self.seed,
        }
        if self.block_labels is not None:
            d["block_labels"] = self.block_labels.tolist()
        if self.omega is not None:
            d["omega"] = self.omega.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> SyntheticScenario:
        kw = dict(d)
        if "grid" in kw:
            kw["spec"] = GridSpec.from_dict(kw.pop("grid"))
        else:
            kw["spec"] = GridSpec(nx=10, ny=14)
        known = set(cls.__dataclass_fields__)
        unknown = set(kw) - known
        if unknown:
            raise BadConfig(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, stream) -> SyntheticScenario:
        return cls.from_dict(json.load(stream))


def block_layout(spec: GridSpec, K: int) -> np.ndarray:
    """Split the rows of the lattice into ``K`` contiguous bands along y."""
    iy = np.arange(spec.n_cells) // spec.nx
    edges = np.linspace(0, spec.ny, K + 1)
    return np.clip(np.searchsorted(edges, iy, side="right") - 1, 0, K - 1)


def true_priors(scenario: SyntheticScenario) -> np.ndarray:
    """Per-cell prior membership probabilities implied by the layout."""
    if scenario.layout == "blocks":
        lab = scenario.block_labels if scenario.block_labels is not None else block_layout(scenario.spec, scenario.K)
        return np.eye(scenario.K)[lab]
    from .pfc import mixing_proportions
    from .spatial_basis import spatial_basis_for_sites

    psi = spatial_basis_for_sites(scenario.spec.centroids(), scenario.L).psi
    return mixing_proportions(scenario.omega, psi)


def simulate_labels(scenario: SyntheticScenario) -> tuple[np.ndarray, np.ndarray]:
    """Draw a cluster label per cell; returns ``(labels, priors)``.

    Block layouts are deterministic; the logit layout samples each cell
    from its prior by inverse CDF on one uniform.
    """
    priors = true_priors(scenario)
    if scenario.layout == "blocks":
        return np.argmax(priors, axis=1), priors
    rng, _, _ = _streams(scenario.seed)
    u = rng.random(priors.shape[0])
    cdf = np.cumsum(priors, axis=1)
    labels = np.minimum((u[:, None] > cdf).sum(axis=1), scenario.K - 1)
    return labels, priors


def simulate_coefficients(labels, scenario: SyntheticScenario) -> np.ndarray:
    """Gaussian coefficient vectors, one per cell, from the cell's cluster."""
    labels = np.asarray(labels, dtype=int)
    _, rng, _ = _streams(scenario.seed)
    z = rng.standard_normal((labels.size, scenario.p))
    chol = np.stack([np.linalg.cholesky(0.5 * (S + S.T)) for S in scenario.covariances])
    return scenario.means[labels] + np.einsum("kij,nj->nki", chol, z)[np.arange(labels.size), labels]


def simulate_abundances(labels, species_pools=None, scenario: SyntheticScenario | None = None) -> AbundanceGrid:
    """Multinomial species counts per cell from the cell's cluster pool.

    Cell totals are ``1 + Poisson(mean_total - 1)`` so no cell is empty.
    """
    scenario = SyntheticScenario() if scenario is None else scenario
    pools = scenario.pools if species_pools is None else [
        p if isinstance(p, SpeciesPool) else SpeciesPool.from_dict(p) for p in species_pools]
    labels = np.asarray(labels, dtype=int)
    if labels.size != scenario.n_cells:
        raise LengthMismatch(f"{labels.size} labels for {scenario.n_cells} cells")
    if labels.max(initial=0) >= len(pools):
        raise BadConfig("fewer species pools than clusters")
    _, _, rng = _streams(scenario.seed)
    totals = 1 + rng.poisson(max(scenario.mean_total - 1.0, 0.0), size=labels.size)
    counts: dict[int, dict[str, int]] = {}
    for cid, (k, n) in enumerate(zip(labels, totals)):
        pool = pools[k]
        draw = rng.multinomial(int(n), pool.probs)
        row = {sp: int(c) for sp, c in zip(pool.species, draw) if c > 0}
        if row:
            counts[cid] = row
    return AbundanceGrid(scenario.spec, counts)


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected pair-counting agreement between two labelings.

    Two trivial labelings (both a single cluster, or both all singletons)
    score 1.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"labelings have lengths {a.size} and {b.size}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1.0) / 2.0))

    index = pairs(table)
    sa, sb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sa * sb / total if total else 0.0
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def write_truth_csv(labels, priors, spec: GridSpec, stream) -> None:
    K = priors.shape[1]
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["cell_id", "x_index", "y_index", "label"] + [f"prior_{k + 1}" for k in range(K)])
    for cid, (lab, pr) in enumerate(zip(labels, priors)):
        ix, iy = spec.cell_index(cid)
        w.writerow([cid, ix, iy, int(lab)] + [format(float(v), ".10g") for v in pr])


def read_truth_csv(stream) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(cell_ids, labels)``."""
    rows = list(csv.DictReader(stream))
    return (np.array([int(r["cell_id"]) for r in rows], dtype=int),
            np.array([int(r["label"]) for r in rows], dtype=int))
