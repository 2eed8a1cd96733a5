"""Log-domain entropic optimal transport between particle clouds.

Solves the dual problem with alternating logsumexp updates (no raw kernel
exponentials, so small epsilon stays finite), optionally annealing epsilon
from the cost scale down to the target on cold starts. The converged dual
potentials drive the flow: their smooth extensions have closed-form
gradients evaluated on either support.

Canonical value convention: ``entropic_cost`` is the raw entropic OT dual
objective, not the debiased Sinkhorn divergence; the flow's drift is the
gradient field of this raw cost. ``sinkhorn_divergence`` reports the
debiased value for diagnostics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .measures import ParticleCloud


class NonFiniteCost(ValueError):
    pass


class SinkhornWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    """epsilon > 0; tol is an l1 marginal tolerance; tol=0 runs exactly
    max_iters updates (used by iteration-budget benchmarks)."""

    epsilon: float
    max_iters: int = 5000
    tol: float = 1e-9
    check_every: int = 5
    anneal: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def with_epsilon(self, epsilon: float) -> "SinkhornConfig":
        return SinkhornConfig(
            epsilon, self.max_iters, self.tol, self.check_every, self.anneal
        )


@dataclass(frozen=True)
class SinkhornSolution:
    """Converged dual state of one edge problem.

    f, g are gauge fixed (weighted mean of f is 0); log_coupling holds
    log P with P's rows/columns matching the marginals within tol at
    convergence.
    """

    f: np.ndarray
    g: np.ndarray
    log_coupling: np.ndarray
    source: ParticleCloud
    target: ParticleCloud
    epsilon: float
    iterations: int
    marginal_error: float
    converged: bool


def cost_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, clamped at 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dim mismatch: {X.shape[1]} vs {Y.shape[1]}")
    C = (
        np.einsum("ij,ij->i", X, X)[:, None]
        + np.einsum("ij,ij->i", Y, Y)[None, :]
        - 2.0 * (X @ Y.T)
    )
    np.maximum(C, 0.0, out=C)
    return C


def _lse_rows(T: np.ndarray) -> np.ndarray:
    m = T.max(axis=1)
    return m + np.log(np.exp(T - m[:, None]).sum(axis=1))


def _lse_cols(T: np.ndarray) -> np.ndarray:
    m = T.max(axis=0)
    return m + np.log(np.exp(T - m[None, :]).sum(axis=0))


def sinkhorn_solve(
    src: ParticleCloud,
    dst: ParticleCloud,
    cfg: SinkhornConfig,
    warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> SinkhornSolution:
    """Alternating log-domain updates until the row marginal l1 error of
    the current coupling drops below tol (columns are exact after each g
    update) or max_iters is hit; non-convergence is flagged, not fatal.
    """
    if src.dim != dst.dim:
        raise ValueError(f"dim mismatch: {src.dim} vs {dst.dim}")
    a, b = src.weights, dst.weights
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("sinkhorn_solve requires strictly positive weights")
    C = cost_matrix(src.points, dst.points)
    if not np.all(np.isfinite(C)):
        raise NonFiniteCost("cost matrix has non-finite entries")
    loga, logb = np.log(a), np.log(b)
    eps = cfg.epsilon

    f = np.zeros(src.n)
    g = np.zeros(dst.n)
    if warm_start is not None:
        f0, g0 = warm_start
        f = np.array(f0, dtype=np.float64, copy=True)
        g = np.array(g0, dtype=np.float64, copy=True)

    T = np.empty_like(C)  # shared work buffer

    def upd_f(e, Kb):
        np.add(Kb, (g / e)[None, :], out=T)
        return -e * _lse_rows(T)

    def upd_g(e, Ka, fv):
        np.add(Ka, (fv / e)[:, None], out=T)
        return -e * _lse_cols(T)

    iterations = 0
    if warm_start is None and cfg.anneal:
        stages = []
        e0 = float(C.mean())
        while e0 > eps * 1.001:
            stages.append(e0)
            e0 /= 4.0
        for e in stages:
            Kb_s = logb[None, :] - C / e
            Ka_s = loga[:, None] - C / e
            for _ in range(6):
                f = upd_f(e, Kb_s)
                g = upd_g(e, Ka_s, f)
                iterations += 1

    Kb = logb[None, :] - C / eps
    Ka = loga[:, None] - C / eps
    err = np.inf
    converged = False
    pending_f = None
    while iterations < cfg.max_iters:
        f = upd_f(eps, Kb) if pending_f is None else pending_f
        pending_f = None
        g = upd_g(eps, Ka, f)
        iterations += 1
        if iterations % cfg.check_every == 0 or iterations >= cfg.max_iters:
            f_would = upd_f(eps, Kb)
            # exact row-marginal l1 error of the coupling built from (f, g)
            err = float(a @ np.abs(np.exp((f - f_would) / eps) - 1.0))
            if err <= cfg.tol * 0.999:
                converged = True
                break
            pending_f = f_would

    log_coupling = loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps
    row_err = float(np.abs(np.exp(_lse_rows(log_coupling)) - a).sum())
    col_err = float(np.abs(np.exp(_lse_cols(log_coupling)) - b).sum())
    marginal_error = row_err + col_err
    if not converged:
        converged = marginal_error <= cfg.tol
    if not converged:
        warnings.warn(
            f"sinkhorn did not reach tol={cfg.tol:g} after {iterations} iterations "
            f"(marginal l1 error {marginal_error:.3e})",
            SinkhornWarning,
            stacklevel=2,
        )

    # gauge: pin the weighted mean of f to 0 (coupling is invariant)
    shift = float(a @ f)
    f = f - shift
    g = g + shift
    return SinkhornSolution(
        f=f,
        g=g,
        log_coupling=log_coupling,
        source=src,
        target=dst,
        epsilon=eps,
        iterations=iterations,
        marginal_error=marginal_error,
        converged=converged,
    )


def entropic_cost(sol: SinkhornSolution) -> float:
    """Dual objective <a,f> + <b,g>: the canonical entropic OT value."""
    return float(sol.source.weights @ sol.f + sol.target.weights @ sol.g)


def primal_cost(sol: SinkhornSolution) -> float:
    """<P,C> + eps * KL(P || a x b), with the mass-corrected KL."""
    P = np.exp(sol.log_coupling)
    C = cost_matrix(sol.source.points, sol.target.points)
    loga = np.log(sol.source.weights)
    logb = np.log(sol.target.weights)
    with np.errstate(invalid="ignore"):
        plogp = np.where(P > 0, P * (sol.log_coupling - loga[:, None] - logb[None, :]), 0.0)
    kl = plogp.sum() - P.sum() + 1.0
    return float((P * C).sum() + sol.epsilon * kl)


def coupling(sol: SinkhornSolution) -> np.ndarray:
    return np.exp(sol.log_coupling)


def _row_softmax(logP: np.ndarray) -> np.ndarray:
    m = logP.max(axis=1, keepdims=True)
    R = np.exp(logP - m)
    return R / R.sum(axis=1, keepdims=True)


def _col_softmax(logP: np.ndarray) -> np.ndarray:
    m = logP.max(axis=0, keepdims=True)
    R = np.exp(logP - m)
    return R / R.sum(axis=0, keepdims=True)


def potential_gradient_source(sol: SinkhornSolution) -> np.ndarray:
    """Rows of grad f at the source atoms: 2 sum_j (P_ij/a_i)(x_i - y_j).

    Computed with row-normalized softmax weights, which is the exact
    gradient of the logsumexp extension of f and coincides with P/a at
    convergence.
    """
    R = _row_softmax(sol.log_coupling)
    return 2.0 * (sol.source.points - R @ sol.target.points)


def potential_gradient_target(sol: SinkhornSolution) -> np.ndarray:
    """Rows of grad g at the target atoms: 2 sum_i (P_ij/b_j)(y_j - x_i)."""
    Cn = _col_softmax(sol.log_coupling)
    return 2.0 * (sol.target.points - Cn.T @ sol.source.points)


def sinkhorn_divergence(
    src: ParticleCloud, dst: ParticleCloud, cfg: SinkhornConfig
) -> float:
    """Debiased divergence OT(a,b) - (OT(a,a) + OT(b,b))/2 (diagnostic)."""
    ab = entropic_cost(sinkhorn_solve(src, dst, cfg))
    aa = entropic_cost(sinkhorn_solve(src, src, cfg))
    bb = entropic_cost(sinkhorn_solve(dst, dst, cfg))
    return ab - 0.5 * (aa + bb)
