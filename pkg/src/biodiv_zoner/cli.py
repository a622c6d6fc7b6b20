"""Command-line front end for the zoning pipeline.

Each subcommand reads the artifacts of the stages before it from the output
directory and writes its own::

    ingest     census CSVs            -> abundance.csv, ingest.json
    simulate   scenario JSON          -> abundance.csv, truth.csv, scenario.json
    profiles   abundance.csv          -> profiles.csv
    smooth     profiles.csv           -> coefficients.csv, smoothing.json
    variogram  coefficients.csv       -> variogram.csv
    basis      coefficients.csv       -> spatial_basis.csv, spatial_basis.json
    fit        coefficients + basis   -> model_fit.json, assignments_fit.csv
    select     coefficients + basis   -> scores.csv, selection.json, model_select.json, assignments_select.csv
    zone       everything above       -> labels.csv, priors.csv, mean_profiles.csv, summary.json, *.svg

Configuration is one JSON document (``--config`` or the file named by
``BIODIV_ZONER_CONFIG``); command-line flags override it. On failure the
command prints a JSON error object to stderr and exits with status 2.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import artifacts as art
from .census import (
    GridSpec,
    alive_stems,
    bin_to_grid,
    filter_alive_trees,
    merge_censuses,
    parse_stem_records,
    read_abundance_csv,
    read_region_mask,
    write_abundance_csv,
)
from .diversity import QGrid, cell_profiles
from .errors import BadConfig, BiodivError
from .pfc import FitConfig, FittedModel, fit_em, model_to_dict
from .plotting import emit_heatmap
from .selection import DEFAULT_K_GRID, DEFAULT_LAMBDA_GRID, grid_search, score_table_csv
from .smoothing import DEFAULT_SMOOTH_LAMBDA, BasisSystem, fit_profiles
from .spatial_basis import spatial_basis_for_sites
from .synth import (
    SyntheticScenario,
    adjusted_rand_index,
    read_truth_csv,
    simulate_abundances,
    simulate_coefficients,
    simulate_labels,
    write_truth_csv,
)
from .variogram import trace_variogram

ENV_CONFIG = "BIODIV_ZONER_CONFIG"

DEFAULTS = {
    "output_dir": "biodiv_out",
    "census": [],
    "fallback_census": None,
    "mask": None,
    "column_map": None,
    "min_dbh": 5.0,
    "grid": GridSpec().to_dict(),
    "abundance": None,
    "truth": None,
    "scenario": None,
    "qgrid": {"Q": 5.0, "n_points": 101},
    "smoothing": {"J": 15, "degree": 3, "n_quad": 501, "smooth_lambda": DEFAULT_SMOOTH_LAMBDA},
    "variogram": {"width": None},
    "spatial": {"L": 16, "target_fraction": None},
    "standardize": True,
    "fit": {"K": 3, "lambda1": 0.1, "lambda2": 0.1, "max_iter": 200, "rel_tol": 1e-6, "n_init": 5, "seed": 0,
            "spatial": True},
    "selection": {"K_grid": list(DEFAULT_K_GRID), "lambda1_grid": list(DEFAULT_LAMBDA_GRID),
                  "lambda2_grid": list(DEFAULT_LAMBDA_GRID), "criterion": "bic"},
    "model_choice": "select",
    "simulate_coefficients": False,
    "emit_svg": True,
    "threads": 1,
}

STAGES = ("ingest", "profiles", "smooth", "variogram", "basis", "fit", "select", "zone", "simulate")


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    d = cfg
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then ``overrides`` (dotted keys allowed)."""
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise BadConfig(f"cannot read config {path}: {exc}") from exc
    for k, v in (overrides or {}).items():
        _set_path(cfg, k, v)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    return cfg


class Run:
    """Resolved paths and settings for one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self.threads = max(int(cfg.get("threads") or 1), 1)

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def spec(self) -> GridSpec:
        # ingest and simulate record the lattice they used
        p = self.path("grid.json")
        if p.exists():
            return GridSpec.from_dict(art.read_json(p))
        return GridSpec.from_dict(self.cfg["grid"])

    def qgrid(self) -> QGrid:
        q = self.cfg["qgrid"]
        return QGrid.uniform(float(q["Q"]), int(q["n_points"]))

    def basis(self) -> BasisSystem:
        s = self.cfg["smoothing"]
        return BasisSystem(int(s["J"]), float(self.cfg["qgrid"]["Q"]), int(s["degree"]), int(s["n_quad"]))

    def fit_config(self, **kw) -> FitConfig:
        f = self.cfg["fit"]
        args = dict(lambda1=float(f["lambda1"]), lambda2=float(f["lambda2"]), max_iter=int(f["max_iter"]),
                    rel_tol=float(f["rel_tol"]), n_init=int(f["n_init"]), seed=int(f["seed"]),
                    spatial=bool(f["spatial"]))
        args.update(kw)
        return FitConfig(**args)

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise BadConfig(f"missing artifact {p}; run the '{stage}' stage first")
        return p


# ---------------------------------------------------------------------------
# stages


def stage_ingest(run: Run) -> dict:
    cfg = run.cfg
    spec = GridSpec.from_dict(cfg["grid"])
    paths = cfg["census"] if isinstance(cfg["census"], list) else [cfg["census"]]
    if not paths:
        raise BadConfig("ingest needs at least one census file ('census')")
    records = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as f:
            records.extend(parse_stem_records(f, cfg.get("column_map")))
    n_primary = len(records)
    if cfg.get("fallback_census"):
        if not cfg.get("mask"):
            raise BadConfig("fallback_census requires a region mask ('mask')")
        with open(cfg["mask"], newline="") as f:
            mask = read_region_mask(f)
        with open(cfg["fallback_census"], newline="", encoding="utf-8") as f:
            fallback = parse_stem_records(f, cfg.get("column_map"))
        records = merge_censuses(records, fallback, mask, spec)
    stems = alive_stems(records, float(cfg["min_dbh"]))
    trees = filter_alive_trees(records, float(cfg["min_dbh"]))
    grid = bin_to_grid(trees, spec)
    with open(run.path("abundance.csv"), "w", newline="") as f:
        write_abundance_csv(grid, f)
    art.write_json(spec.to_dict(), run.path("grid.json"))
    totals = grid.species_totals()
    info = {
        "primary_records": n_primary,
        "merged_records": len(records),
        "filtered_stems": len(stems),
        "trees": len(trees),
        "species": len(totals),
        "species_totals": dict(sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))),
        "occupied_cells": len(grid.occupied_cells()),
    }
    art.write_json(info, run.path("ingest.json"))
    return info


def stage_simulate(run: Run) -> dict:
    sc_cfg = run.cfg.get("scenario")
    if isinstance(sc_cfg, str):
        with open(sc_cfg) as f:
            scenario = SyntheticScenario.from_json(f)
    elif isinstance(sc_cfg, dict):
        scenario = SyntheticScenario.from_dict(sc_cfg)
    else:
        scenario = SyntheticScenario(seed=int(run.cfg["fit"]["seed"]))
    labels, priors = simulate_labels(scenario)
    grid = simulate_abundances(labels, None, scenario)
    with open(run.path("abundance.csv"), "w", newline="") as f:
        write_abundance_csv(grid, f)
    with open(run.path("truth.csv"), "w", newline="") as f:
        write_truth_csv(labels, priors, scenario.spec, f)
    art.write_json(scenario.to_dict(), run.path("scenario.json"))
    art.write_json(scenario.spec.to_dict(), run.path("grid.json"))
    info = {"cells": scenario.n_cells, "K": scenario.K, "seed": scenario.seed, "trees": grid.total}
    if run.cfg.get("simulate_coefficients"):
        # Gaussian draws stand in for smoothed profiles; they skip profiles/smooth
        betas = simulate_coefficients(labels, scenario)
        f, w = art._writer(run.path("coefficients.csv"))
        J = betas.shape[1] - 2
        with f:
            w.writerow(["cell_id", "x_index", "y_index", "xi0", "xi1"] + [f"alpha_{j + 1}" for j in range(J)]
                       + ["constant", "rmse", "converged"])
            for cid, b in enumerate(betas):
                ix, iy = scenario.spec.cell_index(cid)
                w.writerow([cid, ix, iy] + [art.fmt(v) for v in b] + ["false", "0", "true"])
        info["coefficients"] = int(betas.shape[0])
    return info


def _abundance_path(run: Run) -> Path:
    src = run.cfg.get("abundance")
    return Path(src) if src else run.require("abundance.csv", "ingest")


def stage_profiles(run: Run) -> dict:
    spec = run.spec
    with open(_abundance_path(run), newline="") as f:
        grid = read_abundance_csv(f, spec)
    qg = run.qgrid()
    ids, H = cell_profiles(grid.matrix(), qg)
    art.write_profiles(run.path("profiles.csv"), ids, H, qg, spec)
    return {"cells": int(ids.size), "q_points": len(qg)}


def stage_smooth(run: Run) -> dict:
    from .diversity import ProfilePoints

    ids, H, qg = art.read_profiles(run.require("profiles.csv", "profiles"))
    basis = run.basis()
    lam = float(run.cfg["smoothing"]["smooth_lambda"])
    profiles = fit_profiles([ProfilePoints(qg, h) for h in H], basis, lam, ids.tolist(), n_jobs=run.threads)
    art.write_coefficients(run.path("coefficients.csv"), profiles, run.spec)
    rmse = np.array([p.rmse for p in profiles])
    info = {"basis": art.basis_to_dict(basis, lam), "cells": int(ids.size),
            "max_rmse": float(rmse.max()) if rmse.size else 0.0,
            "not_converged": int(sum(not p.converged for p in profiles)),
            "constant_profiles": int(sum(p.coefficients.constant_flag for p in profiles))}
    art.write_json(info, run.path("smoothing.json"))
    return info


def _load_coefficients(run: Run):
    ids, betas, const = art.read_coefficients(run.require("coefficients.csv", "smooth"))
    sm = run.path("smoothing.json")
    basis = art.basis_from_dict(art.read_json(sm)["basis"]) if sm.exists() else run.basis()
    return ids, betas, const, basis


def stage_variogram(run: Run) -> dict:
    ids, betas, const, basis = _load_coefficients(run)
    spec = run.spec
    curves = art.curves_from_betas(betas, const, basis, basis.grid)
    width = run.cfg["variogram"].get("width") or spec.cell_size
    vg = trace_variogram(curves, spec.centroids()[ids], basis=basis, width=float(width))
    f, w = art._writer(run.path("variogram.csv"))
    with f:
        w.writerow(["lag_center", "semivariance", "pair_count", "bin_lo", "bin_hi"])
        for c, g, n, lo, hi in zip(vg.lag_centers, vg.semivariance, vg.pair_counts, vg.bin_edges[:-1],
                                   vg.bin_edges[1:]):
            w.writerow([art.fmt(c), art.fmt(g), int(n), art.fmt(lo), art.fmt(hi)])
    return {"bins": int(vg.pair_counts.size), "pairs": int(vg.pair_counts.sum())}


def stage_basis(run: Run) -> dict:
    ids, _, _, _ = _load_coefficients(run)
    spec = run.spec
    s = run.cfg["spatial"]
    target = s.get("target_fraction")
    sb = spatial_basis_for_sites(spec.centroids()[ids], None if target else int(s["L"]), target)
    art.write_spatial_basis(run.path("spatial_basis.csv"), ids, sb.psi, spec)
    info = {"L": sb.L, "explained_fraction": sb.explained_fraction, "sites": int(ids.size),
            "leading_eigenvalues": sb.eigenvalues[: sb.L].tolist()}
    art.write_json(info, run.path("spatial_basis.json"))
    return info


def _design(run: Run):
    ids, betas, const, basis = _load_coefficients(run)
    bids, psi = art.read_spatial_basis(run.require("spatial_basis.csv", "basis"))
    if not np.array_equal(ids, bids):
        raise BadConfig("coefficient and spatial-basis files cover different cells; rerun 'basis'")
    center = betas.mean(axis=0)
    scale = betas.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    if not run.cfg["standardize"]:
        center, scale = np.zeros_like(center), np.ones_like(scale)
    Z = (betas - center) / scale
    return ids, betas, const, basis, Z, psi, center, scale


def _write_model(run: Run, stage: str, model: FittedModel, ids, psi, center, scale) -> None:
    d = model_to_dict(model)
    d["standardization"] = {"center": center.tolist(), "scale": scale.tolist()}
    art.write_json(d, run.path(f"model_{stage}.json"))
    art.write_assignments(run.path(f"assignments_{stage}.csv"), ids, model.labels, model.tau, model.priors(psi))


def stage_fit(run: Run) -> dict:
    ids, _, _, _, Z, psi, center, scale = _design(run)
    model = fit_em(Z, psi, int(run.cfg["fit"]["K"]), run.fit_config())
    _write_model(run, "fit", model, ids, psi, center, scale)
    return {"K": model.K, "objective": model.objective, "converged": model.converged, "n_iter": model.n_iter}


def stage_select(run: Run) -> dict:
    ids, _, _, _, Z, psi, center, scale = _design(run)
    sel = run.cfg["selection"]
    crit = sel.get("criterion", "bic")
    if crit not in ("bic", "icl"):
        raise BadConfig("selection.criterion must be 'bic' or 'icl'")
    res = grid_search(Z, psi, sel["K_grid"], sel["lambda1_grid"], sel["lambda2_grid"], run.fit_config(),
                      n_jobs=run.threads)
    run.path("scores.csv").write_text(score_table_csv(res))
    best = res.best_bic if crit == "bic" else res.best_icl
    if best is None:
        raise BadConfig("every fit in the grid failed; see scores.csv")
    _write_model(run, "select", res.model_for(best), ids, psi, center, scale)

    def rec(r):
        return None if r is None else {"K": r.K, "lambda1": r.lambda1, "lambda2": r.lambda2, "bic": r.bic, "icl": r.icl}

    info = {"criterion": crit, "best_bic": rec(res.best_bic), "best_icl": rec(res.best_icl),
            "top_bic": [rec(r) for r in res.ranking("bic")[:3]], "top_icl": [rec(r) for r in res.ranking("icl")[:3]],
            "n_fits": len(res.records), "n_failed": sum(not r.ok for r in res.records)}
    art.write_json(info, run.path("selection.json"))
    return info


def _ensure(run: Run, name: str, stage: str) -> None:
    if not run.path(name).exists():
        _timed(run, stage)


def stage_zone(run: Run) -> dict:
    if not run.cfg.get("abundance"):
        if run.cfg.get("census"):
            _ensure(run, "abundance.csv", "ingest")
        elif not run.path("abundance.csv").exists():
            _timed(run, "simulate")
    _ensure(run, "profiles.csv", "profiles")
    _ensure(run, "coefficients.csv", "smooth")
    _ensure(run, "spatial_basis.csv", "basis")
    choice = run.cfg.get("model_choice", "select")
    if choice not in ("select", "fit"):
        raise BadConfig("model_choice must be 'select' or 'fit'")
    _ensure(run, f"model_{choice}.json", choice)

    spec = run.spec
    ids, betas, const, basis = _load_coefficients(run)
    assignments = run.require(f"assignments_{choice}.csv", choice)
    aids, labels = art.read_assignments(assignments)
    model = art.read_json(run.require(f"model_{choice}.json", choice))
    K = int(model["K"])
    with open(assignments, newline="") as f:
        rows = list(csv.DictReader(f))
    priors = np.array([[float(r[f"pi_{k + 1}"]) for k in range(K)] for r in rows]).reshape(len(rows), K)

    f, w = art._writer(run.path("labels.csv"))
    with f:
        w.writerow(["cell_id", "x_index", "y_index", "label"])
        for cid, lab in zip(aids, labels):
            ix, iy = spec.cell_index(int(cid))
            w.writerow([int(cid), ix, iy, int(lab) + 1])
    f, w = art._writer(run.path("priors.csv"))
    with f:
        w.writerow(["cell_id", "x_index", "y_index"] + [f"pi_{k + 1}" for k in range(K)])
        for cid, pr in zip(aids, priors):
            ix, iy = spec.cell_index(int(cid))
            w.writerow([int(cid), ix, iy] + [art.fmt(v) for v in pr])

    qg = run.qgrid().q
    curves = art.curves_from_betas(betas, const, basis, qg)
    f, w = art._writer(run.path("mean_profiles.csv"))
    sizes = [int(np.sum(labels == k)) for k in range(K)]
    with f:
        w.writerow(["q"] + [f"cluster_{k + 1}" for k in range(K)])
        means = [curves[labels == k].mean(axis=0) if sizes[k] else np.full(qg.size, np.nan) for k in range(K)]
        for j, q in enumerate(qg):
            w.writerow([art.fmt(q)] + [art.fmt(m[j]) for m in means])

    if run.cfg["emit_svg"]:
        full = np.full(spec.n_cells, np.nan)
        full[aids] = labels
        emit_heatmap(full, spec, run.path("labels.svg"), "cluster labels", categorical=True)
        for k in range(K):
            full = np.full(spec.n_cells, np.nan)
            full[aids] = priors[:, k]
            emit_heatmap(full, spec, run.path(f"prior_{k + 1}.svg"), f"prior probability, cluster {k + 1}")

    summary = {
        "K": K,
        "lambda1": model["lambda1"],
        "lambda2": model["lambda2"],
        "seed": model["seed"],
        "L": model["L"],
        "cells": int(aids.size),
        "cluster_sizes": sizes,
        "selected_by": run.cfg["selection"].get("criterion", "bic") if choice == "select" else "fixed K",
        "objective": model["objective_trace"][-1],
        "converged": model["converged"],
    }
    truth = run.cfg.get("truth") or (run.path("truth.csv") if run.path("truth.csv").exists() else None)
    if truth:
        with open(truth, newline="") as f:
            tids, tlab = read_truth_csv(f)
        lookup = dict(zip(tids.tolist(), tlab.tolist()))
        summary["ari"] = adjusted_rand_index([lookup[int(c)] for c in aids], labels)
    art.write_json(summary, run.path("summary.json"))
    return summary


_STAGE_FUNCS = {
    "ingest": stage_ingest,
    "simulate": stage_simulate,
    "profiles": stage_profiles,
    "smooth": stage_smooth,
    "variogram": stage_variogram,
    "basis": stage_basis,
    "fit": stage_fit,
    "select": stage_select,
    "zone": stage_zone,
}


def _timed(run: Run, name: str) -> dict:
    t = time.perf_counter()
    info = _STAGE_FUNCS[name](run)
    run.timings[name] = round(time.perf_counter() - t, 3)
    return info


def run_subcommand(name: str, config: dict) -> int:
    """Run one stage; returns the exit status. Errors go to stderr as JSON."""
    if name not in _STAGE_FUNCS:
        raise BadConfig(f"unknown stage {name!r}")
    run = Run(config)
    try:
        info = _timed(run, name)
    except (BiodivError, OSError, ValueError, KeyError) as exc:
        err = {"stage": name, "error": type(exc).__name__, "message": str(exc)}
        if os.environ.get("BIODIV_ZONER_DEBUG"):
            err["traceback"] = traceback.format_exc()
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        try:
            art.write_json(err, run.path("error.json"))
        except OSError:
            pass
        return 2
    # wall-clock times vary between runs, so they live apart from the artifacts
    art.write_json({"stage": name, "timings_s": run.timings, "threads": run.threads}, run.path("run_log.json"))
    err_file = run.path("error.json")
    if err_file.exists():
        err_file.unlink()
    print(json.dumps(art._round(info), sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biodiv-zoner", description="Functional zoning of biodiversity profiles.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help=f"JSON config (default: ${ENV_CONFIG})")
    p.add_argument("-o", "--output-dir")
    p.add_argument("--census", action="append", help="stem census CSV (repeatable)")
    p.add_argument("--fallback-census")
    p.add_argument("--mask", help="CSV of x_index,y_index cells filled from the fallback census")
    p.add_argument("--abundance", help="abundance CSV to use instead of output_dir/abundance.csv")
    p.add_argument("--truth", help="truth-label CSV for reporting ARI")
    p.add_argument("--scenario", help="synthetic scenario JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--L", type=int)
    p.add_argument("--threads", type=int, help="cap on worker processes")
    p.add_argument("--svg", dest="emit_svg", action="store_true", default=None)
    p.add_argument("--no-svg", dest="emit_svg", action="store_false")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. selection.K_grid=[2,3,4]")
    return p


def _overrides(ns) -> dict:
    o = {}
    direct = {"output_dir": ns.output_dir, "census": ns.census, "fallback_census": ns.fallback_census,
              "mask": ns.mask, "abundance": ns.abundance, "truth": ns.truth, "scenario": ns.scenario,
              "threads": ns.threads, "emit_svg": ns.emit_svg, "fit.seed": ns.seed, "fit.K": ns.K,
              "fit.lambda1": ns.lambda1, "fit.lambda2": ns.lambda2, "spatial.L": ns.L}
    for k, v in direct.items():
        if v is not None:
            o[k] = v
    for item in ns.set:
        if "=" not in item:
            raise BadConfig(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        o[k.strip()] = _parse_value(v)
    return o


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = load_config(ns.config, _overrides(ns))
    except BiodivError as exc:
        print(json.dumps({"stage": ns.stage, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return run_subcommand(ns.stage, cfg)


if __name__ == "__main__":
    sys.exit(main())
