"""Matrix-free symmetric solvers shared by the implicit-gradient and
Hodge modules: conjugate gradients and power/inverse eigen iterations,
each accepting a projector that keeps iterates inside a gauge subspace.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class SolverStalled(RuntimeError):
    """Iterative solve failed to reduce the residual below tol."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def conjugate_gradient(
    apply_op: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 1000,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple:
    """CG for a symmetric PSD operator restricted to a subspace.

    Returns (x, residual_norm, converged). tol is relative to |rhs|.
    """
    if project is not None:
        rhs = project(rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    x = np.zeros_like(rhs)
    if rhs_norm == 0.0:
        return x, 0.0, True
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * rhs_norm
    for _ in range(max_iters):
        Ap = apply_op(p)
        if project is not None:
            Ap = project(Ap)
        denom = float(p @ Ap)
        if denom <= 0.0:
            break  # lost positive definiteness (numerics); report best iterate
        alpha = rs / denom
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= target:
            return x, float(np.sqrt(rs_new)), True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, float(np.sqrt(rs)), False


def power_iteration(
    apply_op: Callable[[np.ndarray], np.ndarray],
    n: int,
    iters: int = 200,
    tol: float = 1e-12,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    if project is not None:
        v = project(v)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    lam = 0.0
    for _ in range(iters):
        w = apply_op(v)
        if project is not None:
            w = project(w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam_new = float(v @ w)
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def smallest_eigen_inverse_iteration(
    apply_op: Callable[[np.ndarray], np.ndarray],
    n: int,
    iters: int = 100,
    shift: float = 1e-10,
    cg_tol: float = 1e-12,
    cg_iters: int = 2000,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    seed: int = 1,
) -> float:
    """Smallest eigenvalue via shifted inverse iteration with CG solves.

    Raises SolverStalled if an inner solve cannot reduce its residual.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    if project is not None:
        v = project(v)
    v /= np.linalg.norm(v)

    def shifted(x):
        return apply_op(x) + shift * x

    lam = float(v @ apply_op(v))
    for _ in range(iters):
        w, res, ok = conjugate_gradient(
            shifted, v, tol=cg_tol, max_iters=cg_iters, project=project
        )
        if not ok and res > 1e-6:
            raise SolverStalled("inverse iteration inner CG stalled", res)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ apply_op(v))
        if abs(lam_new - lam) <= 1e-14 * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam
