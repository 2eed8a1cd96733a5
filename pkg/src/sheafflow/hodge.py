"""Tangent-sheaf linear algebra on particle clouds: coboundary d, its
adjoint d*, the sheaf Laplacian d*d, harmonic-residual stationarity, and
extremal-eigenvalue probes.

Cochains are per-particle vector fields: 0-cochains live on node clouds,
1-cochains on each edge's pushed-source support. The forward block of d
is the mechanism Jacobian applied rowwise; the identity block is
realized as barycentric transport along the edge's entropic coupling,
which degenerates to the identity pairing when supports coincide. All
inner products carry particle weights (the L2(mu) geometry), with source
weights on edge blocks; adjoints are exact in that geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .flow import FlowConfig, FlowState
from .graph import CausalGraph
from .measures import pushforward
from .sinkhorn import (
    SinkhornSolution,
    _row_softmax,
    potential_gradient_source,
    sinkhorn_solve,
)
from .solvers import power_iteration, smallest_eigen_inverse_iteration


@dataclass(frozen=True)
class TangentField:
    """One (N_v, D_v) block of per-particle vectors per node."""

    blocks: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, state: FlowState) -> "TangentField":
        return cls({n: np.zeros_like(c.points) for n, c in state.clouds.items()})

    def norm(self, state: FlowState) -> float:
        return float(np.sqrt(max(inner_nodes(self, self, state), 0.0)))


@dataclass(frozen=True)
class EdgeCochain:
    """One (N_src, D_dst) block per edge, on the pushed-source support."""

    blocks: List[np.ndarray]

    def norm(self, state: FlowState, graph: CausalGraph) -> float:
        return float(np.sqrt(max(inner_edges(self, self, state, graph), 0.0)))


@dataclass(frozen=True)
class TransportAligner:
    """Row-stochastic couplings aligning each edge's target cloud onto the
    pushed-source support, frozen at the current state."""

    matrices: List[np.ndarray]
    solutions: List[SinkhornSolution]


def inner_nodes(V: TangentField, W: TangentField, state: FlowState) -> float:
    total = 0.0
    for name, cloud in state.clouds.items():
        a = cloud.weights
        total += float(a @ np.einsum("ij,ij->i", V.blocks[name], W.blocks[name]))
    return total


def inner_edges(
    V: EdgeCochain, W: EdgeCochain, state: FlowState, graph: CausalGraph
) -> float:
    total = 0.0
    for e, Ve, We in zip(graph.edges, V.blocks, W.blocks):
        a = state.clouds[e.src].weights
        total += float(a @ np.einsum("ij,ij->i", Ve, We))
    return total


def build_aligners(
    state: FlowState, graph: CausalGraph, cfg: FlowConfig
) -> TransportAligner:
    """Solves each edge problem and row-normalizes its coupling."""
    scfg = cfg.solver_config()
    mats, sols = [], []
    for e in graph.edges:
        pushed = pushforward(state.clouds[e.src], e.mechanism)
        sol = sinkhorn_solve(pushed, state.clouds[e.dst], scfg)
        mats.append(_row_softmax(sol.log_coupling))
        sols.append(sol)
    return TransportAligner(matrices=mats, solutions=sols)


def coboundary(
    V: TangentField,
    state: FlowState,
    graph: CausalGraph,
    aligners: TransportAligner,
) -> EdgeCochain:
    """(dV)_e row k = J_Phi(x_k) V_src[k] - (B_e V_dst)[k]."""
    blocks = []
    for e, B in zip(graph.edges, aligners.matrices):
        Xu = state.clouds[e.src].points
        fwd = e.mechanism.jvp(Xu, V.blocks[e.src])
        blocks.append(fwd - B @ V.blocks[e.dst])
    return EdgeCochain(blocks)


def coboundary_adjoint(
    W: EdgeCochain,
    state: FlowState,
    graph: CausalGraph,
    aligners: TransportAligner,
) -> TangentField:
    """Exact adjoint of coboundary in the weighted inner products:
    J^T W_e rows accumulate on the source node, minus the weight-
    rebalanced transpose transport of W_e on the target node."""
    out = {n: np.zeros_like(c.points) for n, c in state.clouds.items()}
    for e, B, We in zip(graph.edges, aligners.matrices, W.blocks):
        src = state.clouds[e.src]
        dst = state.clouds[e.dst]
        out[e.src] += e.mechanism.vjp(src.points, We)
        out[e.dst] -= ((src.weights[:, None] * B).T @ We) / dst.weights[:, None]
    return TangentField(out)


def sheaf_laplacian_apply(
    V: TangentField,
    state: FlowState,
    graph: CausalGraph,
    aligners: TransportAligner,
) -> TangentField:
    return coboundary_adjoint(coboundary(V, state, graph, aligners), state, graph, aligners)


RESIDUAL_FLOOR = 1e-9


def harmonic_residual(
    state: FlowState,
    graph: CausalGraph,
    cfg: FlowConfig,
    aligners: Optional[TransportAligner] = None,
) -> tuple:
    """Stress field R_e = w_e * grad of the source-side potential on the
    pushed support, and the stationarity ratio |d* R| / |R|.

    At a converged flow the ratio is small (the residual is harmonic); a
    vanishing R reports 0 by convention.
    """
    if aligners is None:
        aligners = build_aligners(state, graph, cfg)
    blocks = [
        e.weight * potential_gradient_source(sol)
        for e, sol in zip(graph.edges, aligners.solutions)
    ]
    R = EdgeCochain(blocks)
    r_norm = R.norm(state, graph)
    if r_norm <= RESIDUAL_FLOOR:
        return R, 0.0
    dstar = coboundary_adjoint(R, state, graph, aligners)
    return R, dstar.norm(state) / r_norm


def _flatten(V: TangentField, state: FlowState, names: List[str]) -> np.ndarray:
    parts = []
    for n in names:
        w = np.sqrt(state.clouds[n].weights)
        parts.append((V.blocks[n] * w[:, None]).ravel())
    return np.concatenate(parts)


def _unflatten(x: np.ndarray, state: FlowState, names: List[str]) -> TangentField:
    blocks = {}
    off = 0
    for n in names:
        cloud = state.clouds[n]
        size = cloud.n * cloud.dim
        w = np.sqrt(cloud.weights)
        blocks[n] = x[off : off + size].reshape(cloud.n, cloud.dim) / w[:, None]
        off += size
    return TangentField(blocks)


def laplacian_operator(state: FlowState, graph: CausalGraph, aligners: TransportAligner):
    """Symmetric Euclidean representation of the Laplacian (coordinates
    rescaled by sqrt of the particle weights). Returns (apply, dim)."""
    names = list(graph.node_names)

    def apply(x: np.ndarray) -> np.ndarray:
        V = _unflatten(x, state, names)
        LV = sheaf_laplacian_apply(V, state, graph, aligners)
        return _flatten(LV, state, names)

    dim = sum(state.clouds[n].n * state.clouds[n].dim for n in names)
    return apply, dim


def extremal_eigen_estimate(
    state: FlowState,
    graph: CausalGraph,
    aligners: TransportAligner,
    which: str = "max",
    iters: int = 500,
) -> float:
    """Extremal eigenvalue of the sheaf Laplacian in the weighted geometry:
    power iteration for the largest, shifted inverse iteration with CG
    for the smallest."""
    apply, dim = laplacian_operator(state, graph, aligners)
    if which == "max":
        return power_iteration(apply, dim, iters=iters, tol=1e-14)
    if which == "min":
        lam_max = power_iteration(apply, dim, iters=min(iters, 100), tol=1e-10)
        return smallest_eigen_inverse_iteration(
            apply,
            dim,
            iters=min(iters, 100),
            shift=max(lam_max, 1.0) * 1e-12,
            cg_tol=1e-13,
            cg_iters=max(iters, 4 * dim),
        )
    raise ValueError(f"which must be 'max' or 'min', got {which!r}")
