"""Stem-census ingest: parse, merge, filter and bin mapped stems.

A census file lists one row per stem. Trees are reconstructed from their
stems, filtered to live individuals above a diameter threshold, and binned
onto a rectangular lattice of square cells to give per-cell species
abundances.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from collections import Counter
from collections.abc import Callable, Collection, Iterable, Mapping
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .errors import DuplicateStem, MalformedRow, MissingColumn, OutOfBounds

DEFAULT_COLUMNS = {
    "stem_id": "stem.id",
    "tree_id": "tree.id",
    "species": "sp",
    "x": "gx",
    "y": "gy",
    "dbh": "dbh",
    "status": "status",
}

_MISSING = {"", "na", "nan", "null", "none"}


class StemStatus(str, enum.Enum):
    ALIVE = "alive"
    DEAD = "dead"
    LOST_STEM = "lost_stem"
    MISSING = "missing"
    PRIOR = "prior"

    @classmethod
    def parse(cls, text: str) -> StemStatus:
        key = text.strip().lower().replace(" ", "_")
        return cls(key)


@dataclass(frozen=True)
class StemRecord:
    stem_id: str
    tree_id: str
    species: str
    x: float
    y: float
    dbh: float | None
    status: StemStatus


@dataclass(frozen=True)
class TreeRecord:
    tree_id: str
    species: str
    x: float
    y: float
    max_dbh: float


@dataclass(frozen=True)
class GridSpec:
    """Rectangular lattice of square cells.

    Cell ``(ix, iy)`` covers ``[origin_x + ix*cell_size, origin_x + (ix+1)*cell_size)``
    along x (and likewise along y). Cell ids run x-fastest:
    ``cell_id = iy * nx + ix``.
    """

    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 20.0
    nx: int = 25
    ny: int = 35

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("nx and ny must be at least 1")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_id(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def cell_index(self, cell_id: int) -> tuple[int, int]:
        return cell_id % self.nx, cell_id // self.nx

    def locate(self, x: float, y: float) -> tuple[int, int] | None:
        """Return ``(ix, iy)`` for a point or None if it lies off the grid.

        Intervals are half-open except the last cell on each axis, which is
        closed on its upper edge so that points on the plot boundary are kept.
        """
        fx = (x - self.origin_x) / self.cell_size
        fy = (y - self.origin_y) / self.cell_size
        if not (math.isfinite(fx) and math.isfinite(fy)):
            return None
        ix = _axis_index(fx, self.nx)
        iy = _axis_index(fy, self.ny)
        if ix is None or iy is None:
            return None
        return ix, iy

    def centroids(self) -> np.ndarray:
        """Cell centres as an ``(N, 2)`` array ordered by cell id."""
        ids = np.arange(self.n_cells)
        ix = ids % self.nx
        iy = ids // self.nx
        return np.column_stack(
            [
                self.origin_x + (ix + 0.5) * self.cell_size,
                self.origin_y + (iy + 0.5) * self.cell_size,
            ]
        )

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "cell_size": self.cell_size,
            "nx": self.nx,
            "ny": self.ny,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GridSpec:
        return cls(
            origin_x=float(d.get("origin_x", 0.0)),
            origin_y=float(d.get("origin_y", 0.0)),
            cell_size=float(d.get("cell_size", 20.0)),
            nx=int(d.get("nx", 25)),
            ny=int(d.get("ny", 35)),
        )


def _axis_index(f: float, n: int) -> int | None:
    if f < 0 or f > n:
        return None
    if f == n:
        return n - 1
    return int(math.floor(f))


@dataclass
class AbundanceGrid:
    """Per-cell species counts on a :class:`GridSpec`.

    ``counts`` maps cell id to a ``{species: count}`` dict; cells without
    trees are simply absent.
    """

    spec: GridSpec
    counts: dict[int, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for cid, row in self.counts.items():
            if not 0 <= cid < self.spec.n_cells:
                raise OutOfBounds(f"cell id {cid} outside grid of {self.spec.n_cells} cells")
            for sp, c in row.items():
                if c < 1:
                    raise ValueError(f"cell {cid}: count for {sp!r} must be >= 1, got {c}")

    @property
    def total(self) -> int:
        return sum(sum(row.values()) for row in self.counts.values())

    @property
    def species(self) -> list[str]:
        return sorted({sp for row in self.counts.values() for sp in row})

    def occupied_cells(self) -> list[int]:
        return sorted(self.counts)

    def centroids(self) -> np.ndarray:
        return self.spec.centroids()

    def species_totals(self) -> dict[str, int]:
        tot: Counter = Counter()
        for row in self.counts.values():
            tot.update(row)
        return dict(tot)

    def matrix(self, species: list[str] | None = None) -> np.ndarray:
        """Dense ``(N, S)`` count matrix in cell-id order."""
        species = self.species if species is None else species
        col = {sp: j for j, sp in enumerate(species)}
        out = np.zeros((self.spec.n_cells, len(species)), dtype=np.int64)
        for cid, row in self.counts.items():
            for sp, c in row.items():
                out[cid, col[sp]] = c
        return out


def parse_stem_records(
    stream: TextIO,
    column_map: Mapping[str, str] | None = None,
    on_error: str = "raise",
) -> list[StemRecord]:
    """Read a stem-census CSV.

    Parameters
    ----------
    stream : text file object
        Comma separated, with a header row.
    column_map : mapping, optional
        Maps the fields ``stem_id, tree_id, species, x, y, dbh, status`` to
        header names. Missing keys fall back to the HF253 names in
        :data:`DEFAULT_COLUMNS`.
    on_error : {"raise", "warn"}
        With ``"raise"`` the first malformed row raises :class:`MalformedRow`.
        With ``"warn"`` malformed rows are skipped and listed in a single
        warning.

    Missing diameters (``NA``, empty) are kept as ``dbh=None`` and counted in
    one summary warning.
    """
    cols = dict(DEFAULT_COLUMNS)
    if column_map:
        cols.update(column_map)
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    for key, name in cols.items():
        if name not in header:
            raise MissingColumn(f"column {name!r} (for {key}) not in header {header}")

    records = []
    bad = []
    n_missing_dbh = 0
    for i, row in enumerate(reader, start=1):
        try:
            rec = _parse_row(i, row, cols)
        except MalformedRow as exc:
            if on_error == "raise":
                raise
            bad.append(exc)
            continue
        if rec.dbh is None:
            n_missing_dbh += 1
        records.append(rec)
    if n_missing_dbh:
        warnings.warn(f"{n_missing_dbh} stems have no diameter; kept with dbh=None", stacklevel=2)
    if bad:
        detail = "; ".join(str(e) for e in bad[:10])
        warnings.warn(f"skipped {len(bad)} malformed rows: {detail}", stacklevel=2)
    return records


def _parse_row(i: int, row: Mapping[str, str], cols: Mapping[str, str]) -> StemRecord:
    def coord(key):
        raw = row[cols[key]]
        try:
            v = float(raw)
        except (TypeError, ValueError):
            raise MalformedRow(i, cols[key], raw) from None
        if not math.isfinite(v) or v < 0:
            raise MalformedRow(i, cols[key], raw)
        return v

    x = coord("x")
    y = coord("y")
    raw_dbh = (row[cols["dbh"]] or "").strip()
    if raw_dbh.lower() in _MISSING:
        dbh = None
    else:
        try:
            dbh = float(raw_dbh)
        except ValueError:
            raise MalformedRow(i, cols["dbh"], raw_dbh) from None
        if not dbh > 0:
            raise MalformedRow(i, cols["dbh"], raw_dbh)
    raw_status = row[cols["status"]] or ""
    try:
        status = StemStatus.parse(raw_status)
    except ValueError:
        raise MalformedRow(i, cols["status"], raw_status) from None
    return StemRecord(
        stem_id=row[cols["stem_id"]].strip(),
        tree_id=row[cols["tree_id"]].strip(),
        species=row[cols["species"]].strip(),
        x=x,
        y=y,
        dbh=dbh,
        status=status,
    )


def merge_censuses(
    primary: list[StemRecord],
    fallback: list[StemRecord],
    region_mask: Collection[tuple[int, int]] | Callable[[int, int], bool],
    spec: GridSpec,
) -> list[StemRecord]:
    """Fill a region missing from ``primary`` with records from ``fallback``.

    All primary records are kept. Fallback records are added when their
    location falls in a masked cell, given either as a collection of
    ``(x_index, y_index)`` pairs or a predicate on them.
    """
    if callable(region_mask):
        in_mask = region_mask
    else:
        cells = set(region_mask)
        in_mask = lambda ix, iy: (ix, iy) in cells  # noqa: E731

    out = list(primary)
    if not fallback:
        return out
    seen = {r.stem_id for r in primary}
    for rec in fallback:
        loc = spec.locate(rec.x, rec.y)
        if loc is None or not in_mask(*loc):
            continue
        if rec.stem_id in seen:
            raise DuplicateStem(f"stem {rec.stem_id!r} present in both censuses inside the mask")
        seen.add(rec.stem_id)
        out.append(rec)
    return out


def alive_stems(records: Iterable[StemRecord], min_dbh: float = 5.0) -> list[StemRecord]:
    """Stems with status alive and diameter strictly above ``min_dbh``."""
    if min_dbh < 0:
        raise ValueError("min_dbh must be non-negative")
    return [
        r
        for r in records
        if r.status is StemStatus.ALIVE and r.dbh is not None and r.dbh > min_dbh
    ]


def filter_alive_trees(records: Iterable[StemRecord], min_dbh: float = 5.0) -> list[TreeRecord]:
    """Collapse qualifying stems to one record per tree.

    A tree is kept if any of its stems is alive with ``dbh > min_dbh``. Its
    species and location come from the first such stem in input order; its
    diameter is the largest among them.
    """
    trees: dict[str, list] = {}
    for s in alive_stems(records, min_dbh):
        entry = trees.get(s.tree_id)
        if entry is None:
            trees[s.tree_id] = [s.species, s.x, s.y, s.dbh]
        elif s.dbh > entry[3]:
            entry[3] = s.dbh
    return [TreeRecord(tid, sp, x, y, d) for tid, (sp, x, y, d) in trees.items()]


def bin_to_grid(trees: Iterable[TreeRecord], spec: GridSpec) -> AbundanceGrid:
    counts: dict[int, Counter] = {}
    for t in trees:
        loc = spec.locate(t.x, t.y)
        if loc is None:
            raise OutOfBounds(f"tree {t.tree_id!r} at ({t.x}, {t.y}) lies outside the grid")
        cid = spec.cell_id(*loc)
        counts.setdefault(cid, Counter())[t.species] += 1
    return AbundanceGrid(spec, {cid: dict(sorted(c.items())) for cid, c in sorted(counts.items())})


# ---------------------------------------------------------------------------
# artifact I/O

def read_region_mask(stream: TextIO) -> set[tuple[int, int]]:
    """Read ``x_index,y_index`` pairs (header required)."""
    reader = csv.DictReader(stream)
    for name in ("x_index", "y_index"):
        if name not in (reader.fieldnames or []):
            raise MissingColumn(f"mask file lacks column {name!r}")
    return {(int(r["x_index"]), int(r["y_index"])) for r in reader}


def write_abundance_csv(grid: AbundanceGrid, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["cell_id", "x_index", "y_index", "species", "count"])
    for cid in grid.occupied_cells():
        ix, iy = grid.spec.cell_index(cid)
        for sp, c in sorted(grid.counts[cid].items()):
            w.writerow([cid, ix, iy, sp, c])


def read_abundance_csv(stream: TextIO, spec: GridSpec) -> AbundanceGrid:
    reader = csv.DictReader(stream)
    need = ["cell_id", "species", "count"]
    for name in need:
        if name not in (reader.fieldnames or []):
            raise MissingColumn(f"abundance file lacks column {name!r}")
    counts: dict[int, dict[str, int]] = {}
    for i, r in enumerate(reader, start=1):
        try:
            cid = int(r["cell_id"])
            c = int(r["count"])
        except ValueError:
            raise MalformedRow(i, "cell_id/count", f"{r['cell_id']},{r['count']}") from None
        if c <= 0:
            continue
        row = counts.setdefault(cid, {})
        row[r["species"]] = row.get(r["species"], 0) + c
    return AbundanceGrid(spec, counts)
