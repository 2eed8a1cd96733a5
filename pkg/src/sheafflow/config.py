"""JSON experiment configuration: schema validation with dotted key
paths, unknown-key rejection, and construction of graph/flow objects.

CLI flag overrides are applied to the raw dict before validation so
every error is reported against the resolved configuration.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from .graph import (
    Affine,
    CausalGraph,
    Composite,
    EdgeSpec,
    GraphError,
    Mechanism,
    NodeSpec,
    Shift,
    SmoothResidual,
)
from .flow import NOISE_CONVENTIONS, FlowConfig
from .measures import ParticleCloud, load_cloud, sample_gaussian
from .sinkhorn import SinkhornConfig

EXPERIMENTS = ("run", "demo2d", "score", "bench-ift", "tear", "kramers")


class ConfigError(Exception):
    """Invalid configuration; message carries the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check_keys(obj: dict, path: str, required: set, optional: set) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(path, f"expected an object, got {type(obj).__name__}")
    unknown = set(obj) - required - optional
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(path, f"missing required keys {sorted(missing)}")


def _number(obj: dict, key: str, path: str, default=None, minimum=None,
            strict_min=None, integer=False):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}.{key}", f"must be >= {minimum}, got {v!r}")
    if strict_min is not None and v <= strict_min:
        raise ConfigError(f"{path}.{key}", f"must be > {strict_min}, got {v!r}")
    return int(v) if integer else float(v)


def _string(obj: dict, key: str, path: str, default=None, choices=None):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing")
        return default
    v = obj[key]
    if not isinstance(v, str):
        raise ConfigError(f"{path}.{key}", f"expected a string, got {v!r}")
    if choices and v not in choices:
        raise ConfigError(f"{path}.{key}", f"must be one of {list(choices)}, got {v!r}")
    return v


def _vector(v, path: str) -> list:
    if not isinstance(v, list) or not v or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        raise ConfigError(path, "expected a non-empty list of numbers")
    return [float(x) for x in v]


def _matrix(v, path: str) -> list:
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a non-empty list of rows")
    rows = [_vector(r, f"{path}[{i}]") for i, r in enumerate(v)]
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(path, "ragged matrix rows")
    return rows


def parse_mechanism(obj: Any, path: str) -> Mechanism:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected a mechanism object")
    kind = _string(obj, "kind", path)
    try:
        if kind == "shift":
            _check_keys(obj, path, {"kind", "b"}, set())
            return Shift(_vector(obj["b"], f"{path}.b"))
        if kind == "affine":
            _check_keys(obj, path, {"kind", "A", "b"}, set())
            return Affine(_matrix(obj["A"], f"{path}.A"), _vector(obj["b"], f"{path}.b"))
        if kind == "smooth_residual":
            _check_keys(obj, path, {"kind", "w1", "w2", "b1", "scale"}, set())
            return SmoothResidual(
                _matrix(obj["w1"], f"{path}.w1"),
                _matrix(obj["w2"], f"{path}.w2"),
                _vector(obj["b1"], f"{path}.b1"),
                _number(obj, "scale", path, minimum=0.0),
            )
        if kind == "composite":
            _check_keys(obj, path, {"kind", "parts"}, set())
            parts = obj["parts"]
            if not isinstance(parts, list) or not parts:
                raise ConfigError(f"{path}.parts", "expected a non-empty list")
            return Composite(
                tuple(
                    parse_mechanism(p, f"{path}.parts[{i}]") for i, p in enumerate(parts)
                )
            )
    except GraphError as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(
        f"{path}.kind",
        f"unknown mechanism kind {kind!r} "
        "(expected shift|affine|smooth_residual|composite)",
    )


def parse_graph(obj: Any, path: str) -> CausalGraph:
    _check_keys(obj, path, {"nodes", "edges"}, set())
    if not isinstance(obj["nodes"], list) or not obj["nodes"]:
        raise ConfigError(f"{path}.nodes", "expected a non-empty list")
    nodes = []
    for i, n in enumerate(obj["nodes"]):
        p = f"{path}.nodes[{i}]"
        _check_keys(n, p, {"name", "dim"}, set())
        nodes.append(NodeSpec(_string(n, "name", p), _number(n, "dim", p, minimum=1, integer=True)))
    if not isinstance(obj["edges"], list):
        raise ConfigError(f"{path}.edges", "expected a list")
    edges = []
    for i, e in enumerate(obj["edges"]):
        p = f"{path}.edges[{i}]"
        _check_keys(e, p, {"src", "dst", "mechanism"}, {"weight"})
        try:
            edges.append(
                EdgeSpec(
                    _string(e, "src", p),
                    _string(e, "dst", p),
                    parse_mechanism(e["mechanism"], f"{p}.mechanism"),
                    _number(e, "weight", p, default=1.0, strict_min=0.0),
                )
            )
        except GraphError as exc:
            raise ConfigError(p, str(exc)) from None
    try:
        return CausalGraph(nodes, edges)
    except GraphError as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass(frozen=True)
class InitSpec:
    kind: str
    mean: Optional[list] = None
    cov_diag: Optional[list] = None
    n: int = 0
    seed: int = 0
    path: Optional[str] = None

    def realize(self, dim: int, node: str, seed_offset: int = 0) -> ParticleCloud:
        if self.kind == "gaussian":
            if len(self.mean) != dim:
                raise ConfigError(
                    f"init.{node}.mean", f"dim {len(self.mean)} != node dim {dim}"
                )
            return sample_gaussian(self.mean, self.cov_diag, self.n,
                                   self.seed + seed_offset)
        cloud = load_cloud(self.path)
        if cloud.dim != dim:
            raise ConfigError(
                f"init.{node}.path", f"cloud dim {cloud.dim} != node dim {dim}"
            )
        return cloud


def parse_init(obj: Any, path: str, graph: CausalGraph) -> Dict[str, InitSpec]:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object keyed by node name")
    names = set(graph.node_names)
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(path, f"unknown node names {sorted(unknown)}")
    missing = names - set(obj)
    if missing:
        raise ConfigError(path, f"missing init for nodes {sorted(missing)}")
    out = {}
    for name, spec in obj.items():
        p = f"{path}.{name}"
        kind = _string(spec, "kind", p, choices=("gaussian", "file"))
        if kind == "gaussian":
            _check_keys(spec, p, {"kind", "mean", "cov_diag", "n"}, {"seed"})
            mean = _vector(spec["mean"], f"{p}.mean")
            cov = _vector(spec["cov_diag"], f"{p}.cov_diag")
            if len(cov) != len(mean):
                raise ConfigError(f"{p}.cov_diag", "dim differs from mean")
            if any(c < 0 for c in cov):
                raise ConfigError(f"{p}.cov_diag", "entries must be >= 0")
            out[name] = InitSpec(
                kind="gaussian",
                mean=mean,
                cov_diag=cov,
                n=_number(spec, "n", p, minimum=1, integer=True),
                seed=_number(spec, "seed", p, default=0, integer=True),
            )
        else:
            _check_keys(spec, p, {"kind", "path"}, {"format"})
            fmt = _string(spec, "format", p, default="csv", choices=("csv",))
            out[name] = InitSpec(kind="file", path=_string(spec, "path", p))
            del fmt
    return out


def parse_flow(obj: Any, path: str) -> FlowConfig:
    _check_keys(
        obj,
        path,
        {"eta", "epsilon", "steps"},
        {
            "noise_convention",
            "seed",
            "snapshot_every",
            "sinkhorn",
            "drift_clip",
            "half_energy",
            "frozen_nodes",
            "threads",
            "noise_scale",
        },
    )
    sk = obj.get("sinkhorn", {})
    _check_keys(sk, f"{path}.sinkhorn", set(), {"max_iters", "tol", "check_every"})
    sinkhorn = SinkhornConfig(
        epsilon=1.0,  # overridden by the flow's epsilon
        max_iters=_number(sk, "max_iters", f"{path}.sinkhorn", default=2000, minimum=1, integer=True),
        tol=_number(sk, "tol", f"{path}.sinkhorn", default=1e-6, strict_min=0.0),
        check_every=_number(sk, "check_every", f"{path}.sinkhorn", default=2, minimum=1, integer=True),
    )
    frozen = obj.get("frozen_nodes", [])
    if not isinstance(frozen, list) or not all(isinstance(x, str) for x in frozen):
        raise ConfigError(f"{path}.frozen_nodes", "expected a list of node names")
    drift_clip = obj.get("drift_clip")
    if drift_clip is not None:
        drift_clip = _number(obj, "drift_clip", path, strict_min=0.0)
    half = obj.get("half_energy", False)
    if not isinstance(half, bool):
        raise ConfigError(f"{path}.half_energy", "expected a boolean")
    try:
        return FlowConfig(
            eta=_number(obj, "eta", path, strict_min=0.0),
            epsilon=_number(obj, "epsilon", path, minimum=0.0),
            steps=_number(obj, "steps", path, minimum=0, integer=True),
            noise_convention=_string(
                obj, "noise_convention", path, default="alg1", choices=NOISE_CONVENTIONS
            ),
            seed=_number(obj, "seed", path, default=0, integer=True),
            snapshot_every=_number(obj, "snapshot_every", path, default=10, minimum=1, integer=True),
            sinkhorn=sinkhorn,
            drift_clip=drift_clip,
            half_energy=half,
            frozen_nodes=tuple(frozen),
            threads=_number(obj, "threads", path, default=1, minimum=1, integer=True),
            noise_scale=_number(obj, "noise_scale", path, default=1.0, minimum=0.0),
        )
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass(frozen=True)
class ScoreSpec:
    candidates: List[tuple]  # (label, CausalGraph)
    tail: int


@dataclass(frozen=True)
class BenchSpec:
    sizes: List[int]
    horizons: List[int]
    epsilons: List[float]
    dim: int
    seed: int


@dataclass(frozen=True)
class KramersSpec:
    epsilons: List[float]
    seeds: int
    threshold: float
    max_steps: int
    node: str


@dataclass(frozen=True)
class TearSpec:
    epsilons: tuple  # (deterministic, noisy)
    seeds: int


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    raw: dict
    graph: Optional[CausalGraph] = None
    init: Dict[str, InitSpec] = field(default_factory=dict)
    flow: Optional[FlowConfig] = None
    score: Optional[ScoreSpec] = None
    bench: Optional[BenchSpec] = None
    kramers: Optional[KramersSpec] = None
    tear: Optional[TearSpec] = None
    out_dir: Optional[str] = None
    hodge: bool = False

    def initial_clouds(self, seed_offset: int = 0) -> Dict[str, ParticleCloud]:
        return {
            name: spec.realize(self.graph.dim(name), name, seed_offset)
            for name, spec in self.init.items()
        }


def _int_list(v, path: str) -> List[int]:
    if not isinstance(v, list) or not v or not all(
        isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v
    ):
        raise ConfigError(path, "expected a non-empty list of positive integers")
    return list(v)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validates the full experiment dict; raises ConfigError with the
    offending dotted key path."""
    top_optional = {
        "graph", "init", "flow", "score", "bench", "kramers", "tear", "out_dir", "hodge",
    }
    _check_keys(raw, "config", {"experiment"}, top_optional)
    experiment = _string(raw, "experiment", "config", choices=EXPERIMENTS)
    hodge = raw.get("hodge", False)
    if not isinstance(hodge, bool):
        raise ConfigError("hodge", "expected a boolean")

    graph = parse_graph(raw["graph"], "graph") if "graph" in raw else None
    init = {}
    if "init" in raw:
        if graph is None:
            raise ConfigError("init", "init requires a graph")
        init = parse_init(raw["init"], "init", graph)
    flow = parse_flow(raw["flow"], "flow") if "flow" in raw else None

    score = None
    if "score" in raw:
        p = "score"
        _check_keys(raw[p], p, {"candidates"}, {"tail"})
        cands = raw[p]["candidates"]
        if not isinstance(cands, list) or not cands:
            raise ConfigError(f"{p}.candidates", "expected a non-empty list")
        parsed = []
        labels = set()
        for i, c in enumerate(cands):
            cp = f"{p}.candidates[{i}]"
            _check_keys(c, cp, {"label", "graph"}, set())
            label = _string(c, "label", cp)
            if label in labels:
                raise ConfigError(f"{cp}.label", f"duplicate label {label!r}")
            labels.add(label)
            parsed.append((label, parse_graph(c["graph"], f"{cp}.graph")))
        score = ScoreSpec(
            candidates=parsed,
            tail=_number(raw[p], "tail", p, default=20, minimum=1, integer=True),
        )

    bench = None
    if "bench" in raw:
        p = "bench"
        _check_keys(raw[p], p, {"sizes", "horizons", "epsilons"}, {"dim", "seed"})
        eps = raw[p]["epsilons"]
        if not isinstance(eps, list) or not eps or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in eps
        ):
            raise ConfigError(f"{p}.epsilons", "expected a non-empty list of positive numbers")
        bench = BenchSpec(
            sizes=_int_list(raw[p]["sizes"], f"{p}.sizes"),
            horizons=_int_list(raw[p]["horizons"], f"{p}.horizons"),
            epsilons=[float(x) for x in eps],
            dim=_number(raw[p], "dim", p, default=2, minimum=1, integer=True),
            seed=_number(raw[p], "seed", p, default=0, integer=True),
        )

    kramers = None
    if "kramers" in raw:
        p = "kramers"
        _check_keys(raw[p], p, {"epsilons", "node"}, {"seeds", "threshold", "max_steps"})
        eps = raw[p]["epsilons"]
        if not isinstance(eps, list) or not eps or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in eps
        ):
            raise ConfigError(f"{p}.epsilons", "expected a non-empty list of positive numbers")
        node = _string(raw[p], "node", p)
        if graph is not None and node not in graph.node_names:
            raise ConfigError(f"{p}.node", f"unknown node {node!r}")
        kramers = KramersSpec(
            epsilons=[float(x) for x in eps],
            seeds=_number(raw[p], "seeds", p, default=20, minimum=1, integer=True),
            threshold=_number(raw[p], "threshold", p, default=0.0),
            max_steps=_number(raw[p], "max_steps", p, default=20000, minimum=1, integer=True),
            node=node,
        )

    tear = None
    if "tear" in raw:
        p = "tear"
        _check_keys(raw[p], p, set(), {"epsilons", "seeds"})
        eps = raw[p].get("epsilons", [0.0, 0.1])
        if (
            not isinstance(eps, list)
            or len(eps) != 2
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x >= 0 for x in eps)
        ):
            raise ConfigError(f"{p}.epsilons", "expected a pair of nonnegative numbers")
        tear = TearSpec(
            epsilons=(float(eps[0]), float(eps[1])),
            seeds=_number(raw[p], "seeds", p, default=5, minimum=1, integer=True),
        )

    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir", "expected a string")

    return ExperimentConfig(
        experiment=experiment,
        raw=raw,
        graph=graph,
        init=init,
        flow=flow,
        score=score,
        bench=bench,
        kramers=kramers,
        tear=tear,
        out_dir=out_dir,
        hodge=hodge,
    )


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return raw


def apply_overrides(raw: dict, overrides: Dict[str, Any]) -> dict:
    """Sets dotted-path keys (e.g. flow.eta) on a deep copy of the dict."""
    out = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        cursor = out
        for part in parts[:-1]:
            nxt = cursor.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(dotted, f"cannot override through non-object {part!r}")
            cursor = nxt
        cursor[parts[-1]] = value
    return out
