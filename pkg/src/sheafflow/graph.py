"""Causal DAG with deterministic, differentiable mechanisms.

Mechanisms are declarative (no arbitrary code): shifts, affine maps,
bounded-residual smooth maps, and compositions. Each variant knows how to
evaluate itself, apply its Jacobian (JVP) and its transposed Jacobian
(VJP) analytically, both per-vector and batched over particle rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GraphError(Exception):
    """Base class for graph construction/validation failures."""


class DimMismatch(GraphError):
    pass


class CycleDetected(GraphError):
    pass


class UnknownNode(GraphError):
    pass


def _as_array(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimMismatch(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GraphError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


class Mechanism:
    """Base interface for the mechanism variants."""

    in_dim: int
    out_dim: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Map a batch of row vectors (N, in_dim) -> (N, out_dim)."""
        raise NotImplementedError

    def vjp(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Rows of J(x_k)^T w_k for batched inputs X (N, in) and W (N, out)."""
        raise NotImplementedError

    def jvp(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Rows of J(x_k) v_k for batched X (N, in) and V (N, in)."""
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Dense Jacobian (out_dim, in_dim) at a single point."""
        raise NotImplementedError

    def _check_in(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise DimMismatch(
                f"mechanism expects input dim {self.in_dim}, got {X.shape[1]}"
            )
        return X


@dataclass(frozen=True)
class Shift(Mechanism):
    """x -> x + b."""

    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b", _as_array(self.b, "Shift.b", 1))

    @property
    def in_dim(self) -> int:
        return self.b.shape[0]

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    def apply(self, X):
        return self._check_in(X) + self.b

    def vjp(self, X, W):
        self._check_in(X)
        return _check_cotangent(W, self.out_dim).copy()

    def jvp(self, X, V):
        self._check_in(X)
        return _check_cotangent(V, self.in_dim).copy()

    def jacobian(self, x):
        return np.eye(self.in_dim)


@dataclass(frozen=True)
class Affine(Mechanism):
    """x -> A x + b, with A possibly rectangular."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = _as_array(self.A, "Affine.A", 2)
        b = _as_array(self.b, "Affine.b", 1)
        if A.shape[0] != b.shape[0]:
            raise DimMismatch(f"Affine: A rows {A.shape[0]} != b dim {b.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    def apply(self, X):
        return self._check_in(X) @ self.A.T + self.b

    def vjp(self, X, W):
        self._check_in(X)
        return _check_cotangent(W, self.out_dim) @ self.A

    def jvp(self, X, V):
        self._check_in(X)
        return _check_cotangent(V, self.in_dim) @ self.A.T

    def jacobian(self, x):
        return self.A.copy()


def _spectral_norm(A: np.ndarray, iters: int = 20) -> float:
    """Power-iteration estimate of the largest singular value."""
    if A.size == 0 or not np.any(A):
        return 0.0
    v = np.full(A.shape[1], 1.0 / np.sqrt(A.shape[1]))
    for _ in range(iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = A.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(A @ v))


@dataclass(frozen=True)
class SmoothResidual(Mechanism):
    """x -> x + W2' tanh(W1 x + b1), rescaled so the residual branch has
    operator norm <= scale < 1 (hence the map is bi-Lipschitz).

    W2' = W2 * scale / (||W1|| * ||W2||), with spectral norms estimated by
    power iteration at construction. tanh has derivative bounded by 1, so
    Lip(residual) <= ||W2'|| * ||W1|| <= scale.
    """

    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray
    scale: float

    def __post_init__(self):
        W1 = _as_array(self.W1, "SmoothResidual.W1", 2)
        W2 = _as_array(self.W2, "SmoothResidual.W2", 2)
        b1 = _as_array(self.b1, "SmoothResidual.b1", 1)
        if not (0.0 <= self.scale < 1.0):
            raise GraphError(f"SmoothResidual.scale must be in [0,1), got {self.scale}")
        if W1.shape[0] != b1.shape[0]:
            raise DimMismatch("SmoothResidual: W1 rows != b1 dim")
        if W2.shape != (W1.shape[1], W1.shape[0]):
            raise DimMismatch(
                f"SmoothResidual: W2 must be {W1.shape[1]}x{W1.shape[0]}, got {W2.shape}"
            )
        norm_prod = _spectral_norm(W1) * _spectral_norm(W2)
        if norm_prod > 0.0:
            W2 = W2 * (self.scale / norm_prod)
        W2 = np.ascontiguousarray(W2)
        W2.setflags(write=False)
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)
        object.__setattr__(self, "b1", b1)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W1.shape[1]

    def _hidden(self, X):
        return np.tanh(X @ self.W1.T + self.b1)

    def apply(self, X):
        X = self._check_in(X)
        return X + self._hidden(X) @ self.W2.T

    def vjp(self, X, W):
        X = self._check_in(X)
        W = _check_cotangent(W, self.out_dim)
        s = 1.0 - self._hidden(X) ** 2  # tanh' at the hidden preactivations
        return W + (s * (W @ self.W2)) @ self.W1

    def jvp(self, X, V):
        X = self._check_in(X)
        V = _check_cotangent(V, self.in_dim)
        s = 1.0 - self._hidden(X) ** 2
        return V + (s * (V @ self.W1.T)) @ self.W2.T

    def jacobian(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        s = 1.0 - self._hidden(x) ** 2
        return np.eye(self.in_dim) + self.W2 @ (s[0, :, None] * self.W1)


@dataclass(frozen=True)
class Composite(Mechanism):
    """Applies parts left-to-right; VJPs chain in reverse order."""

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise GraphError("Composite needs at least one part")
        for p, q in zip(parts, parts[1:]):
            if p.out_dim != q.in_dim:
                raise DimMismatch(
                    f"Composite: part output dim {p.out_dim} != next input dim {q.in_dim}"
                )
        object.__setattr__(self, "parts", parts)

    @property
    def in_dim(self) -> int:
        return self.parts[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.parts[-1].out_dim

    def apply(self, X):
        X = self._check_in(X)
        for p in self.parts:
            X = p.apply(X)
        return X

    def vjp(self, X, W):
        X = self._check_in(X)
        inputs = [X]
        for p in self.parts[:-1]:
            inputs.append(p.apply(inputs[-1]))
        W = _check_cotangent(W, self.out_dim)
        for p, Xp in zip(reversed(self.parts), reversed(inputs)):
            W = p.vjp(Xp, W)
        return W

    def jvp(self, X, V):
        X = self._check_in(X)
        V = _check_cotangent(V, self.in_dim)
        for p in self.parts:
            V = p.jvp(X, V)
            X = p.apply(X)
        return V

    def jacobian(self, x):
        x = np.asarray(x, dtype=np.float64)
        J = np.eye(self.in_dim)
        for p in self.parts:
            J = p.jacobian(x) @ J
            x = p.apply(x.reshape(1, -1))[0]
        return J


def _check_cotangent(W, dim: int) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[1] != dim:
        raise DimMismatch(f"expected vectors of dim {dim}, got {W.shape[1]}")
    return W


def apply_mechanism(m: Mechanism, x) -> np.ndarray:
    """Evaluate the mechanism at a single point."""
    return m.apply(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


def mechanism_vjp(m: Mechanism, x, w) -> np.ndarray:
    """J(x)^T w, computed analytically per variant."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    return m.vjp(x, w)[0]


def mechanism_jacobian(m: Mechanism, x) -> np.ndarray:
    """Dense analytic Jacobian at x."""
    return m.jacobian(np.asarray(x, dtype=np.float64))


def mechanism_jacobian_fd(m: Mechanism, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian estimate (test oracle)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.shape[0]):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((apply_mechanism(m, x + e) - apply_mechanism(m, x - e)) / (2 * h))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class NodeSpec:
    name: str
    dim: int

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise GraphError("node name must be a non-empty string")
        if self.dim < 1:
            raise GraphError(f"node {self.name}: dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class EdgeSpec:
    src: str
    dst: str
    mechanism: Mechanism
    weight: float = 1.0

    def __post_init__(self):
        if self.src == self.dst:
            raise GraphError(f"self-loop on node {self.src}")
        if not (self.weight > 0):
            raise GraphError(f"edge {self.src}->{self.dst}: weight must be > 0")

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"


@dataclass(frozen=True)
class CausalGraph:
    """Validated DAG; immutable after construction, safe to share."""

    nodes: tuple
    edges: tuple
    _order: tuple = field(init=False, repr=False)

    def __init__(self, nodes: Sequence[NodeSpec], edges: Sequence[EdgeSpec]):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "_order", tuple(validate_graph(self)))

    @property
    def node_names(self) -> tuple:
        return tuple(n.name for n in self.nodes)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise UnknownNode(name)

    def dim(self, name: str) -> int:
        return self.node(name).dim

    def topological_order(self) -> tuple:
        return self._order

    def parents(self, name: str):
        return [e for e in self.edges if e.dst == name]

    def children(self, name: str):
        return [e for e in self.edges if e.src == name]

    def edge_names(self) -> list:
        """Unique display names; parallel edges get an index suffix."""
        seen: dict = {}
        names = []
        for e in self.edges:
            base = e.name
            k = seen.get(base, 0)
            seen[base] = k + 1
            names.append(base if k == 0 else f"{base}#{k + 1}")
        return names


def validate_graph(g: CausalGraph) -> list:
    """Checks acyclicity, endpoint existence and mechanism dims.

    Returns a topological ordering of node names (Kahn's algorithm).
    """
    names = [n.name for n in g.nodes]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise GraphError(f"duplicate node names: {dup}")
    dims = {n.name: n.dim for n in g.nodes}
    for e in g.edges:
        if e.src not in dims:
            raise UnknownNode(f"edge {e.name}: unknown source node {e.src!r}")
        if e.dst not in dims:
            raise UnknownNode(f"edge {e.name}: unknown target node {e.dst!r}")
        if e.mechanism.in_dim != dims[e.src]:
            raise DimMismatch(
                f"edge {e.name}: mechanism input dim {e.mechanism.in_dim} "
                f"!= node {e.src} dim {dims[e.src]}"
            )
        if e.mechanism.out_dim != dims[e.dst]:
            raise DimMismatch(
                f"edge {e.name}: mechanism output dim {e.mechanism.out_dim} "
                f"!= node {e.dst} dim {dims[e.dst]}"
            )
    indeg = {n: 0 for n in names}
    for e in g.edges:
        indeg[e.dst] += 1
    ready = [n for n in names if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for e in g.edges:
            if e.src == n:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
    if len(order) != len(names):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CycleDetected(f"cycle through nodes {stuck}")
    return order
