"""Experiment runners behind the CLI subcommands.

Each runner consumes a validated ExperimentConfig, writes its artifacts
(trace CSVs, final cloud CSVs, JSON summaries) under the run directory,
and returns the summary dict. Artifact schemas are documented in the
README and consumed by the plotting frontend without transformation.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ExperimentConfig
from .discovery import Candidate, CandidateSet, ScoreRow, score_with_trace, stable_seed
from .flow import (
    EnergyTrace,
    FlowConfig,
    FlowDiverged,
    FlowEngine,
    FlowState,
    run_flow,
)
from .hodge import build_aligners, extremal_eigen_estimate, harmonic_residual
from .implicit import (
    OptimalityJacobian,
    grad_positions_envelope,
    grad_positions_ift,
    unrolled_grad,
)
from .measures import ParticleCloud, center_of_mass, store_cloud, total_variance
from .sinkhorn import SinkhornConfig, entropic_cost, sinkhorn_solve


# ---------------------------------------------------------------------------
# Embedded default configurations

def demo2d_config(n: int = 300) -> dict:
    """The 3-node conflict: A->B->C routes the origin to [8,0] while the
    direct A->C edge routes it to [0,8]."""
    return {
        "experiment": "demo2d",
        "graph": {
            "nodes": [
                {"name": "A", "dim": 2},
                {"name": "B", "dim": 2},
                {"name": "C", "dim": 2},
            ],
            "edges": [
                {"src": "A", "dst": "B", "weight": 1.0,
                 "mechanism": {"kind": "shift", "b": [4.0, 4.0]}},
                {"src": "B", "dst": "C", "weight": 1.0,
                 "mechanism": {"kind": "shift", "b": [4.0, -4.0]}},
                {"src": "A", "dst": "C", "weight": 1.0,
                 "mechanism": {"kind": "shift", "b": [0.0, 8.0]}},
            ],
        },
        "init": {
            "A": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 11},
            "B": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 12},
            "C": {"kind": "gaussian", "mean": [8.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 13},
        },
        "flow": {
            "eta": 0.01,
            "epsilon": 0.1,
            "steps": 500,
            "seed": 7,
            "snapshot_every": 10,
            "sinkhorn": {"tol": 1e-4, "max_iters": 60, "check_every": 10},
        },
    }


def tear_config(n: int = 200) -> dict:
    # at N=200 the central particle spacing drops below the deterministic
    # arm's solver floor, so the pure-drift flow visibly merges neighbors
    cfg = demo2d_config(n)
    cfg["experiment"] = "tear"
    cfg["flow"]["sinkhorn"] = {"tol": 1e-4, "max_iters": 30, "check_every": 10}
    cfg["tear"] = {"epsilons": [0.0, 0.1], "seeds": 5}
    return cfg


def kramers_config() -> dict:
    """1-D dynamic node pulled by two frozen anchors near -1 and +1 with
    asymmetric confidence weights. The weights are calibrated against the
    realized anchor centers (seeds 101/102) so the quadratic well bottoms
    out at -0.0354, giving an escape barrier over the threshold at 0 of
    about 0.25 in COM units: mean hitting times stay inside max_steps for
    epsilon down to 0.1 while scaling steeply in 1/epsilon."""
    return {
        "experiment": "kramers",
        "graph": {
            "nodes": [
                {"name": "L", "dim": 1},
                {"name": "R", "dim": 1},
                {"name": "X", "dim": 1},
            ],
            "edges": [
                {"src": "L", "dst": "X", "weight": 1.030293,
                 "mechanism": {"kind": "shift", "b": [0.0]}},
                {"src": "R", "dst": "X", "weight": 0.969707,
                 "mechanism": {"kind": "shift", "b": [0.0]}},
            ],
        },
        "init": {
            "L": {"kind": "gaussian", "mean": [-1.0], "cov_diag": [0.01],
                  "n": 100, "seed": 101},
            "R": {"kind": "gaussian", "mean": [1.0], "cov_diag": [0.01],
                  "n": 100, "seed": 102},
            "X": {"kind": "gaussian", "mean": [-0.0354], "cov_diag": [0.01],
                  "n": 100, "seed": 103},
        },
        "flow": {
            "eta": 0.01,
            "epsilon": 0.1,
            "steps": 1,
            "seed": 5,
            "snapshot_every": 10,
            "frozen_nodes": ["L", "R"],
            "sinkhorn": {"tol": 1e-3, "max_iters": 80},
        },
        "kramers": {
            "epsilons": [0.4, 0.2, 0.1],
            "seeds": 20,
            "threshold": 0.0,
            "max_steps": 20000,
            "node": "X",
        },
    }


def bench_config() -> dict:
    return {
        "experiment": "bench-ift",
        "bench": {
            "sizes": [10, 20],
            "horizons": [10, 100, 1000],
            "epsilons": [0.5],
            "dim": 2,
            "seed": 0,
        },
    }


def score_config(n: int = 200) -> dict:
    """Discovery construction: observational clouds generated by the true
    chain A->B->C; the spurious candidate adds a conflicting direct edge."""
    chain_edges = [
        {"src": "A", "dst": "B", "weight": 1.0,
         "mechanism": {"kind": "shift", "b": [4.0, 4.0]}},
        {"src": "B", "dst": "C", "weight": 1.0,
         "mechanism": {"kind": "shift", "b": [4.0, -4.0]}},
    ]
    nodes = [
        {"name": "A", "dim": 2},
        {"name": "B", "dim": 2},
        {"name": "C", "dim": 2},
    ]
    spurious_edges = chain_edges + [
        {"src": "A", "dst": "C", "weight": 1.0,
         "mechanism": {"kind": "shift", "b": [0.0, 8.0]}},
    ]
    return {
        "experiment": "score",
        "graph": {"nodes": nodes, "edges": []},
        "init": {
            "A": {"kind": "gaussian", "mean": [0.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 21},
            "B": {"kind": "gaussian", "mean": [4.0, 4.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 22},
            "C": {"kind": "gaussian", "mean": [8.0, 0.0], "cov_diag": [1.0, 1.0],
                  "n": n, "seed": 23},
        },
        "flow": {
            "eta": 0.01,
            "epsilon": 0.2,
            "steps": 250,
            "seed": 3,
            "snapshot_every": 5,
            "sinkhorn": {"tol": 1e-6, "max_iters": 3000},
        },
        "score": {
            "tail": 20,
            "candidates": [
                {"label": "true_chain", "graph": {"nodes": nodes, "edges": chain_edges}},
                {"label": "spurious_extra_edge",
                 "graph": {"nodes": nodes, "edges": spurious_edges}},
            ],
        },
    }


DEFAULT_CONFIGS = {
    "demo2d": demo2d_config,
    "tear": tear_config,
    "kramers": kramers_config,
    "bench-ift": bench_config,
    "score": score_config,
}


# ---------------------------------------------------------------------------
# Runners

def _write_clouds(state: FlowState, outdir: Path) -> None:
    for name, cloud in state.clouds.items():
        store_cloud(cloud, outdir / f"cloud_{_safe(name)}.csv")


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def _flow_summary(trace: EnergyTrace, initial: FlowState, final: FlowState,
                  wallclock: float) -> dict:
    energies = trace.energies()
    e0, e1 = float(energies[0]), float(energies[-1])
    shifts = {}
    for name in initial.clouds:
        d = center_of_mass(final.clouds[name]) - center_of_mass(initial.clouds[name])
        shifts[name] = [float(v) for v in d]
    return {
        "initial_energy": e0,
        "final_energy": e1,
        "reduction_pct": 100.0 * (e0 - e1) / e0 if e0 > 0 else 0.0,
        "com_shifts": shifts,
        "final_com": {
            n: [float(v) for v in center_of_mass(c)] for n, c in final.clouds.items()
        },
        "final_variance": {n: total_variance(c) for n, c in final.clouds.items()},
        "wallclock": wallclock,
    }


def _hodge_block(state: FlowState, graph, fcfg: FlowConfig,
                 initial: FlowState) -> dict:
    # cold probe solves get their own budget, independent of the flow's cap
    probe_cfg = replace(
        fcfg, sinkhorn=SinkhornConfig(epsilon=1.0, max_iters=3000, tol=1e-6)
    )
    _, stat0 = harmonic_residual(initial, graph, probe_cfg)
    aligners = build_aligners(state, graph, probe_cfg)
    _, stat1 = harmonic_residual(state, graph, probe_cfg, aligners)
    return {
        "stationarity_initial": stat0,
        "stationarity_final": stat1,
        "laplacian_lambda_max": extremal_eigen_estimate(
            state, graph, aligners, "max", iters=200
        ),
        "laplacian_lambda_min": extremal_eigen_estimate(
            state, graph, aligners, "min", iters=50
        ),
    }


def run_flow_experiment(cfg: ExperimentConfig, outdir: Path) -> dict:
    if cfg.graph is None or cfg.flow is None or not cfg.init:
        from .config import ConfigError

        raise ConfigError("config", "flow experiments need graph, init and flow blocks")
    t0 = time.perf_counter()
    initial = FlowState(step=0, clouds=cfg.initial_clouds())
    final, trace = run_flow(cfg.graph, initial, cfg.flow)
    wall = time.perf_counter() - t0
    trace.to_csv(outdir / "trace.csv")
    _write_clouds(final, outdir)
    summary = _flow_summary(trace, initial, final, wall)
    if cfg.hodge:
        summary["hodge"] = _hodge_block(final, cfg.graph, cfg.flow, initial)
    return summary


def run_score_experiment(cfg: ExperimentConfig, outdir: Path) -> dict:
    data = cfg.initial_clouds()
    cands = CandidateSet(
        data, [Candidate(label, g) for label, g in cfg.score.candidates]
    )
    t0 = time.perf_counter()
    rows: List[ScoreRow] = []
    for cand in cands.candidates:
        ccfg = replace(cfg.flow, seed=stable_seed(cfg.flow.seed, cand.label))
        try:
            row, trace = score_with_trace(cand.graph, data, ccfg, cfg.score.tail)
            rows.append(replace(row, label=cand.label))
            if trace is not None:
                trace.to_csv(outdir / f"score_trace_{_safe(cand.label)}.csv")
        except FlowDiverged as exc:
            rows.append(
                ScoreRow(cand.label, float("nan"), float("nan"), float("nan"),
                         False, error=str(exc))
            )
    ok = sorted((r for r in rows if r.error is None), key=lambda r: r.score)
    failed = [r for r in rows if r.error is not None]
    best = ok[0].score if ok else float("nan")
    report = {
        "rows": [
            {
                "label": r.label,
                "score": r.score,
                "tail_mean": r.tail_mean,
                "tail_std": r.tail_std,
                "converged": r.converged,
                "error": r.error,
            }
            for r in ok + failed
        ],
        "gap_ratios": {
            r.label: (r.score / best if best > 0 else (1.0 if r.score == 0 else None))
            for r in ok
        },
        "wallclock": time.perf_counter() - t0,
    }
    return report


def run_bench_experiment(cfg: ExperimentConfig, outdir: Path) -> dict:
    spec = cfg.bench
    rows = []
    for N in spec.sizes:
        for eps in spec.epsilons:
            ss = np.random.SeedSequence(
                entropy=spec.seed, spawn_key=(N, int(round(eps * 1e6)))
            )
            rng = np.random.Generator(np.random.Philox(ss))
            X = rng.standard_normal((N, spec.dim))
            Y = rng.standard_normal((N, spec.dim)) + 0.5
            src = ParticleCloud.uniform(X)
            dst = ParticleCloud.uniform(Y)
            gfd = _fd_position_gradient(src, dst, eps)
            # the IFT path differentiates at the solver's converged root,
            # with retained state independent of any unrolling horizon
            t0 = time.perf_counter()
            conv = sinkhorn_solve(
                src, dst, SinkhornConfig(epsilon=eps, tol=1e-6, max_iters=4000)
            )
            gX_i, gY_i = grad_positions_ift(conv)
            wall_ift = 1e3 * (time.perf_counter() - t0)
            gX_e, gY_e = grad_positions_envelope(conv)
            err_ift = _l1_rel(gX_i, gY_i, *gfd)
            err_env = _l1_rel(gX_e, gY_e, *gfd)
            ift_cells = OptimalityJacobian(conv).retained_cells
            for L in spec.horizons:
                row = {"N": N, "M": N, "L": L, "epsilon": eps}
                t0 = time.perf_counter()
                gX_u, gY_u, tape = unrolled_grad(
                    src, dst, SinkhornConfig(epsilon=eps, anneal=False), L
                )
                row["wall_ms_unrolled"] = 1e3 * (time.perf_counter() - t0)
                row["wall_ms_ift"] = wall_ift
                row["grad_err_unrolled"] = _l1_rel(gX_u, gY_u, *gfd)
                row["grad_err_ift"] = err_ift
                row["grad_err_envelope"] = err_env
                row["tape_cells"] = tape.cells_stored
                row["ift_cells"] = ift_cells
                row["ift_iterations"] = conv.iterations
                row["wall_ms"] = row["wall_ms_unrolled"] + wall_ift
                rows.append(row)
    return {"rows": rows}


def _l1_rel(gX, gY, gX_ref, gY_ref) -> float:
    num = np.abs(gX - gX_ref).sum() + np.abs(gY - gY_ref).sum()
    den = np.abs(gX_ref).sum() + np.abs(gY_ref).sum()
    return float(num / den) if den > 0 else float("nan")


def _fd_position_gradient(
    src: ParticleCloud, dst: ParticleCloud, eps: float, h: float = 1e-5
) -> tuple:
    """Central differences of the tightly converged entropic cost."""
    tight = SinkhornConfig(epsilon=eps, tol=1e-12, max_iters=20000)

    def value(X, Y):
        sol = sinkhorn_solve(
            ParticleCloud(X, src.weights), ParticleCloud(Y, dst.weights), tight
        )
        return entropic_cost(sol)

    X0, Y0 = src.points.copy(), dst.points.copy()
    gX = np.zeros_like(X0)
    for i in range(X0.shape[0]):
        for d in range(X0.shape[1]):
            Xp, Xm = X0.copy(), X0.copy()
            Xp[i, d] += h
            Xm[i, d] -= h
            gX[i, d] = (value(Xp, Y0) - value(Xm, Y0)) / (2 * h)
    gY = np.zeros_like(Y0)
    for j in range(Y0.shape[0]):
        for d in range(Y0.shape[1]):
            Yp, Ym = Y0.copy(), Y0.copy()
            Yp[j, d] += h
            Ym[j, d] -= h
            gY[j, d] = (value(X0, Yp) - value(X0, Ym)) / (2 * h)
    return gX, gY


def run_tear_experiment(cfg: ExperimentConfig, outdir: Path) -> dict:
    from .flow import tearing_diagnostics

    e_det, e_noise = cfg.tear.epsilons
    per_seed = []
    for s in range(cfg.tear.seeds):
        clouds = cfg.initial_clouds(seed_offset=s)
        init = FlowState(step=0, clouds=clouds)
        results = {}
        for tag, eps in (("det", e_det), ("noise", e_noise)):
            fcfg = replace(cfg.flow, epsilon=eps, seed=cfg.flow.seed + s)
            try:
                final, trace = run_flow(cfg.graph, init, fcfg)
                results[tag] = {
                    "state": final,
                    "trace": trace,
                    "aborted_step": None,
                }
            except FlowDiverged as exc:
                results[tag] = {
                    "state": exc.state,
                    "trace": exc.trace,
                    "aborted_step": exc.step,
                }
        if s == 0:
            results["det"]["trace"].to_csv(outdir / "trace_eps0.csv")
            results["noise"]["trace"].to_csv(outdir / "trace_eps.csv")
        diag_det = tearing_diagnostics(results["det"]["state"])
        diag_noise = tearing_diagnostics(results["noise"]["state"])
        nn_ratios = []
        var_ratios = []
        per_node = {}
        for name in diag_det:
            r_nn = diag_det[name]["median_nn_distance"] / max(
                diag_noise[name]["median_nn_distance"], 1e-300
            )
            r_var = diag_det[name]["total_variance"] / max(
                diag_noise[name]["total_variance"], 1e-300
            )
            nn_ratios.append(r_nn)
            var_ratios.append(r_var)
            per_node[name] = {"nn_ratio": r_nn, "variance_ratio": r_var}
        per_seed.append(
            {
                "seed": cfg.flow.seed + s,
                # geometric means; fully merged clouds give ratio 0
                "nn_ratio": float(np.exp(np.mean(np.log(np.maximum(nn_ratios, 1e-300))))),
                "variance_ratio": float(np.exp(np.mean(np.log(np.maximum(var_ratios, 1e-300))))),
                "per_node": per_node,
                "det_aborted_step": results["det"]["aborted_step"],
                "noise_aborted_step": results["noise"]["aborted_step"],
                "noise_final_energy": float(results["noise"]["trace"].energies()[-1]),
            }
        )
    noise_ok = all(
        r["noise_aborted_step"] is None and np.isfinite(r["noise_final_energy"])
        for r in per_seed
    )
    return {
        "epsilons": [e_det, e_noise],
        "seeds": cfg.tear.seeds,
        "final_nn_ratio": float(np.median([r["nn_ratio"] for r in per_seed])),
        "variance_ratio": float(np.median([r["variance_ratio"] for r in per_seed])),
        "nn_ratio_lt_1_count": sum(1 for r in per_seed if r["nn_ratio"] < 1.0),
        "noise_run_completed": noise_ok,
        "per_seed": per_seed,
    }


def run_kramers_experiment(cfg: ExperimentConfig, outdir: Path) -> dict:
    spec = cfg.kramers
    init = FlowState(step=0, clouds=cfg.initial_clouds())
    cells = []
    for eps in spec.epsilons:
        taus = []
        censored = 0
        for s in range(spec.seeds):
            fcfg = replace(cfg.flow, epsilon=eps, seed=cfg.flow.seed + s)
            tau = _first_hitting_time(
                cfg.graph, init, fcfg, spec.node, spec.threshold, spec.max_steps
            )
            if tau is None:
                censored += 1
            else:
                taus.append(tau)
        mean_tau = float(np.mean(taus)) if taus else None
        cells.append(
            {
                "epsilon": eps,
                "taus": taus,
                "mean_tau": mean_tau,
                "std_tau": float(np.std(taus)) if taus else None,
                "censored_count": censored,
                "all_censored": censored == spec.seeds,
                "eps_log_mean_tau": (
                    eps * math.log(mean_tau) if mean_tau and mean_tau > 0 else None
                ),
            }
        )
    return {
        "threshold": spec.threshold,
        "max_steps": spec.max_steps,
        "seeds": spec.seeds,
        "node": spec.node,
        "cells": cells,
    }


def _first_hitting_time(
    graph,
    init: FlowState,
    fcfg: FlowConfig,
    node: str,
    threshold: float,
    max_steps: int,
) -> Optional[int]:
    """Steps until the node's COM first coordinate crosses the threshold."""
    engine = FlowEngine(graph, init, fcfg)
    for t in range(max_steps + 1):
        if center_of_mass(engine.state.clouds[node])[0] >= threshold:
            return t
        if t == max_steps:
            break
        sols = engine.solve_edges()
        engine.advance(engine.drifts(sols))
    return None
