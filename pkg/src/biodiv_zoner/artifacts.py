"""CSV/JSON artifacts passed between pipeline stages.

Floats are written with 10 significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .census import GridSpec
from .diversity import QGrid
from .errors import MissingColumn
from .smoothing import BasisSystem, ProfileCoefficients, SmoothedProfile, evaluate_profile


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    out = format(v, ".10g")
    return "0" if out == "-0" else out


def _round(obj):
    """Recursively pass floats through the fixed formatting for JSON output."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if not math.isfinite(v) else float(format(v, ".10g"))
    return obj


def write_json(obj, path: Path) -> None:
    text = json.dumps(_round(obj), indent=1, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def _writer(path):
    f = open(path, "w", newline="")
    return f, csv.writer(f, lineterminator="\n")


def _require(reader, names, what):
    for n in names:
        if n not in (reader.fieldnames or []):
            raise MissingColumn(f"{what} lacks column {n!r}")


# -- profiles -----------------------------------------------------------------

def write_profiles(path, cell_ids, H, qgrid: QGrid, spec: GridSpec) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["cell_id", "x_index", "y_index"] + [f"H_{fmt(q)}" for q in qgrid.q])
        for cid, row in zip(cell_ids, H):
            ix, iy = spec.cell_index(int(cid))
            w.writerow([int(cid), ix, iy] + [fmt(v) for v in row])


def read_profiles(path) -> tuple[np.ndarray, np.ndarray, QGrid]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:1] != ["cell_id"]:
            raise MissingColumn("profile file lacks column 'cell_id'")
        qcols = [i for i, h in enumerate(header) if h.startswith("H_")]
        q = np.array([float(header[i][2:]) for i in qcols])
        ids, H = [], []
        for row in r:
            ids.append(int(row[0]))
            H.append([float(row[i]) for i in qcols])
    return np.array(ids, dtype=int), np.array(H, dtype=float).reshape(len(ids), q.size), QGrid(q, float(q[-1]))


# -- coefficients ---------------------------------------------------------------

def basis_to_dict(basis: BasisSystem, smooth_lambda: float) -> dict:
    return {"J": basis.J, "Q": basis.Q, "degree": basis.degree, "n_quad": basis.grid.size,
            "smooth_lambda": smooth_lambda}


def basis_from_dict(d) -> BasisSystem:
    return BasisSystem(int(d["J"]), float(d["Q"]), int(d["degree"]), int(d["n_quad"]))


def write_coefficients(path, profiles: list[SmoothedProfile], spec: GridSpec) -> None:
    J = profiles[0].coefficients.alpha.size if profiles else 0
    f, w = _writer(path)
    with f:
        w.writerow(["cell_id", "x_index", "y_index", "xi0", "xi1"] + [f"alpha_{j + 1}" for j in range(J)]
                   + ["constant", "rmse", "converged"])
        for sp in profiles:
            c = sp.coefficients
            ix, iy = spec.cell_index(c.cell_id)
            w.writerow([c.cell_id, ix, iy] + [fmt(v) for v in c.beta] + [fmt(c.constant_flag), fmt(sp.rmse),
                                                                         fmt(sp.converged)])


def read_coefficients(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(cell_ids, betas, constant_flags)``."""
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        _require(r, ["cell_id", "xi0", "xi1"], "coefficient file")
        acols = [h for h in r.fieldnames if h.startswith("alpha_")]
        ids, rows, const = [], [], []
        for row in r:
            ids.append(int(row["cell_id"]))
            rows.append([float(row["xi0"]), float(row["xi1"])] + [float(row[a]) for a in acols])
            const.append(row.get("constant", "false") == "true")
    return np.array(ids, dtype=int), np.array(rows, dtype=float).reshape(len(ids), 2 + len(acols)), np.array(const)


def curves_from_betas(betas, const, basis: BasisSystem, q) -> np.ndarray:
    return np.vstack([evaluate_profile(ProfileCoefficients.from_beta(b, constant_flag=bool(c)), basis, q)
                      for b, c in zip(betas, const)])


# -- spatial basis --------------------------------------------------------------

def write_spatial_basis(path, cell_ids, psi, spec: GridSpec) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["cell_id", "x_index", "y_index"] + [f"psi_{l + 1}" for l in range(psi.shape[1])])
        for cid, row in zip(cell_ids, psi):
            ix, iy = spec.cell_index(int(cid))
            w.writerow([int(cid), ix, iy] + [fmt(v) for v in row])


def read_spatial_basis(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        _require(r, ["cell_id"], "spatial basis file")
        cols = [h for h in r.fieldnames if h.startswith("psi_")]
        ids, rows = [], []
        for row in r:
            ids.append(int(row["cell_id"]))
            rows.append([float(row[c]) for c in cols])
    return np.array(ids, dtype=int), np.array(rows, dtype=float).reshape(len(ids), len(cols))


# -- assignments ------------------------------------------------------------------

def write_assignments(path, cell_ids, labels, tau, priors) -> None:
    K = tau.shape[1]
    f, w = _writer(path)
    with f:
        w.writerow(["cell_id", "label"] + [f"tau_{k + 1}" for k in range(K)] + [f"pi_{k + 1}" for k in range(K)])
        for cid, lab, t, p in zip(cell_ids, labels, tau, priors):
            w.writerow([int(cid), int(lab) + 1] + [fmt(v) for v in t] + [fmt(v) for v in p])


def read_assignments(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(cell_ids, labels)`` with labels starting at 0."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return (np.array([int(r["cell_id"]) for r in rows], dtype=int),
            np.array([int(r["label"]) - 1 for r in rows], dtype=int))
