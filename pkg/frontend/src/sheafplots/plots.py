"""The four figure kinds.

* trajectory2d: per-node COM paths from a flow trace, with optional final
  particle clouds overlaid.
* energy_curve: total energy vs step for one or more traces.
* bench_bars: tape cells and wall time vs unrolling horizon L.
* kramers_scaling: eps * log(mean hitting time) vs eps.

Inputs are the documented sheafflow artifact schemas; a missing column or
key fails with a message naming it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("trajectory2d", "energy_curve", "bench_bars", "kramers_scaling")

PNG_METADATA = {"Software": "sheafplots"}  # keeps renders byte-stable


class PlotDataError(ValueError):
    """Input file does not match the documented schema."""


@dataclass(frozen=True)
class PlotJob:
    kind: str
    inputs: List[str]
    output: str
    clouds: List[str] = field(default_factory=list)  # trajectory2d overlays

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotDataError(f"unknown plot kind {self.kind!r}; expected {KINDS}")
        if not self.inputs:
            raise PlotDataError("at least one input file is required")


def read_trace(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PlotDataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for required in ("step", "total_energy"):
        if required not in header:
            raise PlotDataError(f"{path}: missing column {required!r}")
    cols: Dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        if name == "flags":
            continue
        try:
            cols[name] = np.array([float(r[j]) for r in rows])
        except ValueError as exc:
            raise PlotDataError(f"{path}: column {name!r}: {exc}") from None
    return cols


def trace_nodes(cols: Dict[str, np.ndarray]) -> List[str]:
    names = []
    for key in cols:
        if key.startswith("node:") and key.endswith("_com_0"):
            names.append(key[len("node:") : -len("_com_0")])
    return names


def read_cloud(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "x0":
            raise PlotDataError(f"{path}: missing column 'x0'")
        rows = [[float(v) for v in r] for r in reader if r]
    ncoord = len(header) - 1 if header[-1] == "w" else len(header)
    return np.array(rows)[:, :ncoord]


def figure_trajectory2d(job: PlotJob):
    cols = read_trace(job.inputs[0])
    nodes = trace_nodes(cols)
    if not nodes:
        raise PlotDataError(f"{job.inputs[0]}: missing column 'node:<name>_com_0'")
    fig, ax = plt.subplots(figsize=(7, 6))
    cmap = plt.get_cmap("tab10")
    for k, name in enumerate(nodes):
        ykey = f"node:{name}_com_1"
        if ykey not in cols:
            raise PlotDataError(f"{job.inputs[0]}: missing column {ykey!r}")
        xs, ys = cols[f"node:{name}_com_0"], cols[ykey]
        color = cmap(k % 10)
        ax.plot(xs, ys, "-o", color=color, markersize=3, label=f"{name} COM path")
        ax.plot(xs[-1], ys[-1], "*", color=color, markersize=14)
    for cloud_path in job.clouds:
        pts = read_cloud(cloud_path)
        if pts.shape[1] < 2:
            raise PlotDataError(f"{cloud_path}: need at least 2 coordinates")
        ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.25,
                   label=Path(cloud_path).stem)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("center-of-mass trajectories")
    ax.legend(fontsize=8)
    ax.set_aspect("equal", adjustable="datalim")
    return fig


def figure_energy_curve(job: PlotJob):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in job.inputs:
        cols = read_trace(path)
        ax.plot(cols["step"], cols["total_energy"], label=Path(path).stem)
    ax.set_xlabel("step")
    ax.set_ylabel("total energy")
    ax.set_title("energy vs step")
    ax.legend(fontsize=8)
    return fig


def _read_bench(path) -> List[dict]:
    with open(path) as fh:
        data = json.load(fh)
    rows = data.get("rows")
    if rows is None:
        raise PlotDataError(f"{path}: missing key 'rows'")
    for key in ("L", "tape_cells", "wall_ms", "ift_cells"):
        for row in rows:
            if key not in row:
                raise PlotDataError(f"{path}: bench row missing key {key!r}")
    return rows


def figure_bench_bars(job: PlotJob):
    rows = _read_bench(job.inputs[0])
    horizons = sorted({r["L"] for r in rows})
    tape = [np.mean([r["tape_cells"] for r in rows if r["L"] == L]) for L in horizons]
    ift = [np.mean([r["ift_cells"] for r in rows if r["L"] == L]) for L in horizons]
    wall_u = [
        np.mean([r.get("wall_ms_unrolled", r["wall_ms"]) for r in rows if r["L"] == L])
        for L in horizons
    ]
    wall_i = [
        np.mean([r.get("wall_ms_ift", 0.0) for r in rows if r["L"] == L])
        for L in horizons
    ]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.5))
    x = np.arange(len(horizons))
    width = 0.38
    ax1.bar(x - width / 2, tape, width, label="unrolled tape")
    ax1.bar(x + width / 2, ift, width, label="IFT retained")
    ax1.set_xticks(x, [str(L) for L in horizons])
    ax1.set_xlabel("Sinkhorn horizon L")
    ax1.set_ylabel("cells stored")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax1.set_title("reverse-pass memory")
    ax2.plot(horizons, wall_u, "-o", label="unrolled")
    ax2.plot(horizons, wall_i, "-s", label="IFT")
    ax2.set_xlabel("Sinkhorn horizon L")
    ax2.set_ylabel("wall time (ms)")
    ax2.set_xscale("log")
    ax2.legend(fontsize=8)
    ax2.set_title("gradient wall time")
    fig.tight_layout()
    return fig


def figure_kramers_scaling(job: PlotJob):
    with open(job.inputs[0]) as fh:
        data = json.load(fh)
    cells = data.get("cells")
    if cells is None:
        raise PlotDataError(f"{job.inputs[0]}: missing key 'cells'")
    pts = []
    for cell in cells:
        if "epsilon" not in cell:
            raise PlotDataError(f"{job.inputs[0]}: kramers cell missing key 'epsilon'")
        if cell.get("eps_log_mean_tau") is not None:
            pts.append((cell["epsilon"], cell["eps_log_mean_tau"]))
    if not pts:
        raise PlotDataError(f"{job.inputs[0]}: no uncensored cells to plot")
    pts.sort()
    eps = [p[0] for p in pts]
    vals = [p[1] for p in pts]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(eps, vals, "-o")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("epsilon * log(mean hitting time)")
    ax.set_title("escape-time scaling")
    return fig


_FIGURES = {
    "trajectory2d": figure_trajectory2d,
    "energy_curve": figure_energy_curve,
    "bench_bars": figure_bench_bars,
    "kramers_scaling": figure_kramers_scaling,
}


def render(job: PlotJob) -> str:
    """Renders the job and writes the image; returns the output path."""
    fig = _FIGURES[job.kind](job)
    out = Path(job.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    kwargs = {"dpi": 120}
    if out.suffix.lower() == ".png":
        kwargs["metadata"] = PNG_METADATA
    fig.savefig(out, **kwargs)
    plt.close(fig)
    return str(out)
