"""The core engine: causal Dirichlet energy, per-node topological drift,
and the Euler-Maruyama interacting Langevin integrator.

Each step solves one entropic OT problem per edge between the pushed
source cloud and the target cloud (warm-started from the previous step).
A node's drift sums the forward stress from its parents (gradient of the
target-side potential on its own support) and the pullback stress toward
its children (VJP of the source-side potential gradient through the
mechanism). Noise uses counter-based substreams keyed by (node, step) so
trajectories are independent of scheduling.

Energy convention: each edge is counted once, total = sum_e w_e * cost_e.
The half-sum-over-nodes form in the energy definition double counts each
edge and halves, which is the same total; a ``half_energy`` flag is
available for comparisons against external absolute numbers.

When the flow's epsilon is 0 (tearing regime) the noise is switched off
but the edge problems are still solved at a small positive solver
epsilon, since the drift is defined through entropic potentials.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .graph import CausalGraph
from .measures import ParticleCloud, pushforward
from .sinkhorn import (
    SinkhornConfig,
    SinkhornSolution,
    SinkhornWarning,
    cost_matrix,
    entropic_cost,
    potential_gradient_source,
    potential_gradient_target,
    sinkhorn_solve,
)

TEARING_SOLVER_EPSILON = 0.01

NOISE_CONVENTIONS = ("alg1", "sde")


class FlowDiverged(RuntimeError):
    """Non-finite particle coordinates; reports the step and node, and
    (when raised from a run) the state and trace recorded so far."""

    def __init__(
        self,
        step: int,
        node: str,
        state: Optional["FlowState"] = None,
        trace: Optional["EnergyTrace"] = None,
    ):
        super().__init__(f"non-finite coordinates at step {step}, node {node}")
        self.step = step
        self.node = node
        self.state = state
        self.trace = trace


@dataclass(frozen=True)
class FlowConfig:
    """Hyperparameters of one flow run.

    epsilon couples the Langevin noise and the solver regularization;
    epsilon = 0 selects the deterministic regime (noise off, edge solves
    at TEARING_SOLVER_EPSILON). The optional sinkhorn block supplies
    solver tolerances; its epsilon field is overridden by the flow's.
    """

    eta: float
    epsilon: float
    steps: int
    noise_convention: str = "alg1"
    seed: int = 0
    snapshot_every: int = 10
    sinkhorn: Optional[SinkhornConfig] = None
    drift_clip: Optional[float] = None
    half_energy: bool = False
    frozen_nodes: tuple = ()
    threads: int = 1
    noise_scale: float = 1.0

    def __post_init__(self):
        if not (self.eta > 0):
            raise ValueError("eta must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.noise_convention not in NOISE_CONVENTIONS:
            raise ValueError(f"noise_convention must be one of {NOISE_CONVENTIONS}")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.drift_clip is not None and not (self.drift_clip > 0):
            raise ValueError("drift_clip must be positive when set")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        object.__setattr__(self, "frozen_nodes", tuple(self.frozen_nodes))

    @property
    def solver_epsilon(self) -> float:
        return self.epsilon if self.epsilon > 0 else TEARING_SOLVER_EPSILON

    @property
    def sigma(self) -> float:
        if self.epsilon == 0:
            return 0.0
        if self.noise_convention == "alg1":
            return self.noise_scale * math.sqrt(2.0 * self.epsilon * self.eta)
        return self.noise_scale * math.sqrt(self.epsilon * self.eta)

    def solver_config(self) -> SinkhornConfig:
        base = self.sinkhorn or SinkhornConfig(
            epsilon=1.0, max_iters=2000, tol=1e-6, check_every=2
        )
        return base.with_epsilon(self.solver_epsilon)


@dataclass(frozen=True)
class FlowState:
    step: int
    clouds: Dict[str, ParticleCloud]

    def cloud(self, name: str) -> ParticleCloud:
        return self.clouds[name]


@dataclass(frozen=True)
class TraceRow:
    step: int
    total_energy: float
    edge_costs: Dict[str, float]
    node_com: Dict[str, np.ndarray]
    node_variance: Dict[str, float]
    node_nn_median: Dict[str, float]
    node_drift_norm: Dict[str, float]
    converged: bool


@dataclass
class EnergyTrace:
    edge_names: List[str]
    node_names: List[str]
    node_dims: Dict[str, int]
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.rows.append(row)

    def energies(self) -> np.ndarray:
        return np.array([r.total_energy for r in self.rows])

    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.rows])

    def header(self) -> List[str]:
        cols = ["step", "total_energy"]
        cols += [f"edge:{e}_cost" for e in self.edge_names]
        for n in self.node_names:
            cols += [f"node:{n}_com_{k}" for k in range(self.node_dims[n])]
            cols += [f"node:{n}_var", f"node:{n}_nn_median", f"node:{n}_drift_norm"]
        cols.append("flags")
        return cols

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for r in self.rows:
                row = [r.step, f"{r.total_energy:.17g}"]
                row += [f"{r.edge_costs[e]:.17g}" for e in self.edge_names]
                for n in self.node_names:
                    row += [f"{v:.17g}" for v in r.node_com[n]]
                    row += [
                        f"{r.node_variance[n]:.17g}",
                        f"{r.node_nn_median[n]:.17g}",
                        f"{r.node_drift_norm[n]:.17g}",
                    ]
                row.append("" if r.converged else "sinkhorn_nonconverged")
                writer.writerow(row)


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    """Distance to the nearest other particle, per particle (N >= 2)."""
    D2 = cost_matrix(points, points)
    np.fill_diagonal(D2, np.inf)
    return np.sqrt(D2.min(axis=1))


def tearing_diagnostics(state: FlowState) -> Dict[str, Dict[str, float]]:
    """Per-node nearest-neighbor and spread statistics (tearing proxies)."""
    from .measures import total_variance

    out = {}
    for name, cloud in state.clouds.items():
        if cloud.n < 2:
            raise ValueError(f"node {name}: need at least 2 particles")
        nn = nearest_neighbor_distances(cloud.points)
        out[name] = {
            "median_nn_distance": float(np.median(nn)),
            "min_nn_distance": float(nn.min()),
            "total_variance": total_variance(cloud),
        }
    return out


def _node_rng(seed: int, node_index: int, step: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(node_index, step))
    return np.random.Generator(np.random.Philox(ss))


def langevin_step(
    state: FlowState,
    drifts: Dict[str, np.ndarray],
    cfg: FlowConfig,
    rng: Optional[np.random.Generator] = None,
) -> FlowState:
    """X <- X - eta*V + sigma*xi, with optional per-particle drift clipping.

    Noise substreams are derived from (cfg.seed, node index, step) unless
    an explicit generator is passed; frozen nodes are left untouched.
    Raises FlowDiverged when an update produces non-finite coordinates.
    """
    names = list(state.clouds.keys())
    new_clouds = {}
    for idx, name in enumerate(names):
        cloud = state.clouds[name]
        if name in cfg.frozen_nodes or name not in drifts:
            new_clouds[name] = cloud
            continue
        V = np.asarray(drifts[name], dtype=np.float64)
        if V.shape != cloud.points.shape:
            raise ValueError(
                f"node {name}: drift shape {V.shape} != points {cloud.points.shape}"
            )
        if cfg.drift_clip is not None:
            norms = np.linalg.norm(V, axis=1, keepdims=True)
            scale = np.minimum(1.0, cfg.drift_clip / np.maximum(norms, 1e-300))
            V = V * scale
        X = cloud.points - cfg.eta * V
        if cfg.sigma > 0.0:
            gen = rng if rng is not None else _node_rng(cfg.seed, idx, state.step)
            X = X + cfg.sigma * gen.standard_normal(cloud.points.shape)
        if not np.all(np.isfinite(X)):
            raise FlowDiverged(state.step + 1, name)
        new_clouds[name] = cloud.with_points(X)
    return FlowState(step=state.step + 1, clouds=new_clouds)


class FlowEngine:
    """Stateful stepping over Algorithm-style iterations with warm-started
    per-edge Sinkhorn solves. run_flow and the experiment commands are
    thin loops over this object.
    """

    COLD_BUDGET_FACTOR = 10  # first solve per edge has no warm start

    def __init__(self, graph: CausalGraph, init: FlowState, cfg: FlowConfig):
        self.graph = graph
        self.cfg = cfg
        self.scfg = cfg.solver_config()
        self._cold_scfg = SinkhornConfig(
            epsilon=self.scfg.epsilon,
            max_iters=self.scfg.max_iters * self.COLD_BUDGET_FACTOR,
            tol=self.scfg.tol,
            check_every=self.scfg.check_every,
            anneal=self.scfg.anneal,
        )
        for node in graph.nodes:
            if node.name not in init.clouds:
                raise ValueError(f"no initial cloud for node {node.name}")
            if init.clouds[node.name].dim != node.dim:
                raise ValueError(
                    f"node {node.name}: cloud dim {init.clouds[node.name].dim} "
                    f"!= declared dim {node.dim}"
                )
        for name in cfg.frozen_nodes:
            graph.node(name)  # raises UnknownNode for typos
        self.state = FlowState(
            step=init.step, clouds={n.name: init.clouds[n.name] for n in graph.nodes}
        )
        self.edge_names = graph.edge_names()
        self._warm: List[Optional[tuple]] = [None] * len(graph.edges)
        self.nonconverged_solves = 0
        self.trace = EnergyTrace(
            edge_names=self.edge_names,
            node_names=list(graph.node_names),
            node_dims={n.name: n.dim for n in graph.nodes},
        )

    def solve_edges(self) -> List[SinkhornSolution]:
        def solve_one(i):
            e = self.graph.edges[i]
            pushed = pushforward(self.state.clouds[e.src], e.mechanism)
            warm = self._warm[i]
            scfg = self.scfg if warm is not None else self._cold_scfg
            return sinkhorn_solve(pushed, self.state.clouds[e.dst], scfg, warm_start=warm)

        idxs = range(len(self.graph.edges))
        # non-convergence is tracked per row/engine instead of spamming one
        # warning per solve across thousands of steps
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SinkhornWarning)
            if self.cfg.threads > 1 and len(self.graph.edges) > 1:
                with ThreadPoolExecutor(max_workers=self.cfg.threads) as ex:
                    sols = list(ex.map(solve_one, idxs))
            else:
                sols = [solve_one(i) for i in idxs]
        for i, sol in enumerate(sols):
            self._warm[i] = (sol.f, sol.g)
            if not sol.converged:
                self.nonconverged_solves += 1
        return sols

    def energy(self, sols: List[SinkhornSolution]) -> tuple:
        factor = 0.5 if self.cfg.half_energy else 1.0
        per_edge = {}
        total = 0.0
        for name, e, sol in zip(self.edge_names, self.graph.edges, sols):
            c = factor * e.weight * entropic_cost(sol)
            per_edge[name] = c
            total += c
        return total, per_edge

    def drifts(self, sols: List[SinkhornSolution]) -> Dict[str, np.ndarray]:
        out = {
            n.name: np.zeros_like(self.state.clouds[n.name].points)
            for n in self.graph.nodes
        }
        for e, sol in zip(self.graph.edges, sols):
            out[e.dst] += e.weight * potential_gradient_target(sol)
            gsrc = potential_gradient_source(sol)  # on the pushed support
            src_points = self.state.clouds[e.src].points
            out[e.src] += e.weight * e.mechanism.vjp(src_points, gsrc)
        return out

    def record(self, sols, drifts) -> TraceRow:
        from .measures import center_of_mass, total_variance

        total, per_edge = self.energy(sols)
        com, var, nn_med, dnorm = {}, {}, {}, {}
        for name, cloud in self.state.clouds.items():
            com[name] = center_of_mass(cloud)
            var[name] = total_variance(cloud)
            nn_med[name] = (
                float(np.median(nearest_neighbor_distances(cloud.points)))
                if cloud.n >= 2
                else 0.0
            )
            V = drifts.get(name)
            dnorm[name] = (
                float(np.sqrt(cloud.weights @ np.einsum("ij,ij->i", V, V)))
                if V is not None
                else 0.0
            )
        row = TraceRow(
            step=self.state.step,
            total_energy=total,
            edge_costs=per_edge,
            node_com=com,
            node_variance=var,
            node_nn_median=nn_med,
            node_drift_norm=dnorm,
            converged=all(s.converged for s in sols),
        )
        self.trace.append(row)
        return row

    def advance(self, drifts) -> None:
        try:
            self.state = langevin_step(self.state, drifts, self.cfg)
        except FlowDiverged as exc:
            raise FlowDiverged(exc.step, exc.node, self.state, self.trace) from None

    def should_record(self, step: int) -> bool:
        return step % self.cfg.snapshot_every == 0 or step == self.cfg.steps


def run_flow(
    graph: CausalGraph,
    init: FlowState,
    cfg: FlowConfig,
    on_step: Optional[Callable[[FlowEngine], None]] = None,
) -> tuple:
    """Executes cfg.steps iterations (pushforward, per-edge solves, drift
    assembly, Langevin update), recording trace rows every snapshot_every
    steps plus the initial and final states.

    Raises FlowDiverged (with partial trace attached) on non-finite
    coordinates. Returns (final_state, trace).
    """
    engine = FlowEngine(graph, init, cfg)
    for _ in range(cfg.steps):
        sols = engine.solve_edges()
        drifts = engine.drifts(sols)
        if engine.should_record(engine.state.step):
            engine.record(sols, drifts)
        engine.advance(drifts)
        if on_step is not None:
            on_step(engine)
    sols = engine.solve_edges()
    engine.record(sols, engine.drifts(sols))
    return engine.state, engine.trace


def dirichlet_energy(state: FlowState, graph: CausalGraph, cfg: FlowConfig) -> tuple:
    """Total = sum_e w_e * entropic_cost(pushforward(mu_src) -> mu_dst),
    each edge counted once (halved when cfg.half_energy). Cold solves."""
    scfg = cfg.solver_config()
    factor = 0.5 if cfg.half_energy else 1.0
    per_edge = {}
    total = 0.0
    for name, e in zip(graph.edge_names(), graph.edges):
        pushed = pushforward(state.clouds[e.src], e.mechanism)
        sol = sinkhorn_solve(pushed, state.clouds[e.dst], scfg)
        c = factor * e.weight * entropic_cost(sol)
        per_edge[name] = c
        total += c
    return total, per_edge


def node_drift(
    state: FlowState, graph: CausalGraph, node: str, cfg: FlowConfig
) -> np.ndarray:
    """Drift rows for one node: forward stress from parents plus
    VJP-pulled stress toward children. Cold solves on incident edges."""
    graph.node(node)
    scfg = cfg.solver_config()
    cloud = state.clouds[node]
    V = np.zeros_like(cloud.points)
    for e in graph.edges:
        if e.dst == node:
            pushed = pushforward(state.clouds[e.src], e.mechanism)
            sol = sinkhorn_solve(pushed, cloud, scfg)
            V += e.weight * potential_gradient_target(sol)
        if e.src == node:
            pushed = pushforward(cloud, e.mechanism)
            sol = sinkhorn_solve(pushed, state.clouds[e.dst], scfg)
            gsrc = potential_gradient_source(sol)
            V += e.weight * e.mechanism.vjp(cloud.points, gsrc)
    return V
