"""Static SVG heatmaps of per-cell values on the census lattice."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .census import GridSpec

# viridis sampled at 0, .25, .5, .75, 1
_RAMP = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=float)

# Okabe-Ito palette for cluster labels
_CATEGORICAL = ["#E69F00", "#56B4E9", "#009E73", "#F0E442", "#0072B2", "#D55E00", "#CC79A7", "#000000"]
_MISSING = "#d9d9d9"


def ramp_color(t: float) -> str:
    """Hex colour at position ``t`` in [0, 1] of a linear viridis ramp."""
    t = min(max(float(t), 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(math.floor(t)), len(_RAMP) - 2)
    f = t - i
    rgb = np.rint(_RAMP[i] * (1 - f) + _RAMP[i + 1] * f).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _num(v: float) -> str:
    return format(float(v), ".6g")


def emit_heatmap(values, spec: GridSpec, path, title: str = "", categorical: bool = False, cell_px: int = 16) -> Path:
    """Write one rectangle per cell, coloured on a linear scale, with a legend.

    ``values`` has one entry per cell in cell-id order; NaN cells are drawn
    grey. With ``categorical`` the values are integer labels drawn from a
    fixed palette. Output depends only on the inputs.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size != spec.n_cells:
        raise ValueError(f"expected {spec.n_cells} values, got {v.size}")
    W, H = spec.nx * cell_px, spec.ny * cell_px
    top = 24 if title else 4
    legend_w = 110
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + legend_w + 8}" height="{H + top + 8}" '
        f'font-family="sans-serif" font-size="11">',
    ]
    if title:
        parts.append(f'<text x="4" y="16">{_escape(title)}</text>')
    finite = v[np.isfinite(v)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo

    def colour(x):
        if not math.isfinite(x):
            return _MISSING
        if categorical:
            return _CATEGORICAL[int(x) % len(_CATEGORICAL)]
        return ramp_color((x - lo) / span if span > 0 else 0.5)

    for cid in range(spec.n_cells):
        ix, iy = spec.cell_index(cid)
        x = ix * cell_px
        y = top + (spec.ny - 1 - iy) * cell_px  # y index grows upwards
        parts.append(f'<rect x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" fill="{colour(v[cid])}"/>')

    lx = W + 10
    if categorical:
        labels = sorted({int(x) for x in finite})
        for j, lab in enumerate(labels):
            y = top + j * 16
            parts.append(f'<rect x="{lx}" y="{y}" width="12" height="12" fill="{colour(lab)}"/>')
            parts.append(f'<text x="{lx + 16}" y="{y + 10}">cluster {lab + 1}</text>')
    else:
        n = 32
        bar_h = min(H, 160)
        step = bar_h / n
        for j in range(n):
            t = 1.0 - (j + 0.5) / n
            parts.append(f'<rect x="{lx}" y="{_num(top + j * step)}" width="14" height="{_num(step + 0.5)}" '
                         f'fill="{ramp_color(t)}"/>')
        parts.append(f'<text x="{lx + 18}" y="{top + 10}">{_num(hi)}</text>')
        parts.append(f'<text x="{lx + 18}" y="{_num(top + bar_h)}">{_num(lo)}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
