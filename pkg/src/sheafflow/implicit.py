"""Gradients through the Sinkhorn fixed point, three ways.

* envelope: Danskin's theorem at the fixed point (coupling only),
* IFT: adjoint solve against the Jacobian of the Sinkhorn optimality
  conditions H = [[I, A], [B, I]], where A = P/a and B' = P/b are
  row-stochastic at convergence. The adjoint estimate is the Lagrangian
  gradient, so its error is second order in the fixed-point residual
  while the raw envelope term is first order: at loose tolerances the
  IFT gradient is strictly more accurate.
* unrolled: reverse-mode through exactly L alternating half-updates with
  an explicit tape (one softmax matrix per half-update), the memory-
  hungry baseline the adjoint path avoids.

H is singular along the dual gauge direction (1, -1); solves happen in
the orthogonal subspace. The symmetrization S = diag(a, b) H is used for
CG, and the similarity D^{1/2} H D^{-1/2} for spectral probes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .measures import ParticleCloud
from .sinkhorn import SinkhornConfig, SinkhornSolution, cost_matrix
from .solvers import (
    SolverStalled,
    conjugate_gradient,
    power_iteration,
    smallest_eigen_inverse_iteration,
)

__all__ = [
    "OptimalityJacobian",
    "TapeCounter",
    "SolverStalled",
    "ift_adjoint_solve",
    "grad_positions_envelope",
    "grad_positions_ift",
    "unrolled_grad",
    "hessian_condition_estimate",
    "ConditionEstimate",
]


@dataclass(frozen=True)
class TapeCounter:
    """Reverse-pass memory proxy: scalar cells retained for backprop."""

    cells_stored: int
    iterations: int


class OptimalityJacobian:
    """Implicit representation of H = [[I, A], [B, I]] at a solution.

    Retains the coupling and cost matrix only (2*N*M cells), independent
    of how many iterations produced the solution.
    """

    def __init__(self, sol: SinkhornSolution):
        self.sol = sol
        self.a = sol.source.weights
        self.b = sol.target.weights
        self.P = np.exp(sol.log_coupling)
        self.n = sol.source.n
        self.m = sol.target.n
        self.A = self.P / self.a[:, None]
        self.B = (self.P / self.b[None, :]).T
        # gauge directions: ker(H) = (1,-1), ker(H^T) = (a,-b)
        e = np.concatenate([np.ones(self.n), -np.ones(self.m)])
        self._e = e / np.linalg.norm(e)
        k = np.concatenate([self.a, -self.b])
        self._k = k / np.linalg.norm(k)

    @property
    def retained_cells(self) -> int:
        return 2 * self.n * self.m

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.n], x[self.n :]

    def apply_h(self, x: np.ndarray) -> np.ndarray:
        u, v = self.split(x)
        return np.concatenate([u + self.A @ v, self.B @ u + v])

    def apply_ht(self, x: np.ndarray) -> np.ndarray:
        u, v = self.split(x)
        return np.concatenate([u + self.B.T @ v, self.A.T @ u + v])

    def apply_s(self, x: np.ndarray) -> np.ndarray:
        """S = diag(a, b) H, symmetric PSD with kernel (1, -1)."""
        u, v = self.split(x)
        return np.concatenate([self.a * u + self.P @ v, self.P.T @ u + self.b * v])

    def apply_h_sym(self, x: np.ndarray) -> np.ndarray:
        """D^{-1/2} S D^{-1/2}: symmetric, similar to H."""
        d = np.concatenate([self.a, self.b])
        rd = np.sqrt(d)
        return self.apply_s(x / rd) / rd

    def project_shift(self, x: np.ndarray) -> np.ndarray:
        return x - self._e * (self._e @ x)

    def project_adjoint_kernel(self, x: np.ndarray) -> np.ndarray:
        return x - self._k * (self._k @ x)

    def project_sym_kernel(self, x: np.ndarray) -> np.ndarray:
        d = np.concatenate([self.a, self.b])
        k = np.sqrt(d) * np.sign(np.concatenate([np.ones(self.n), -np.ones(self.m)]))
        k = k / np.linalg.norm(k)
        return x - k * (k @ x)


def ift_adjoint_solve(
    sol: SinkhornSolution,
    cotangent_f: np.ndarray,
    cotangent_g: np.ndarray,
    solver: str = "cg",
    tol: float = 1e-12,
    max_iters: int = 2000,
    jac: Optional[OptimalityJacobian] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Solves H^T lambda = cotangent in the gauge-fixed subspace.

    The returned representative has no component along ker(H^T) = (a,-b);
    that component never affects position gradients.
    """
    jac = jac or OptimalityJacobian(sol)
    r = np.concatenate(
        [
            np.asarray(cotangent_f, dtype=np.float64).reshape(-1),
            np.asarray(cotangent_g, dtype=np.float64).reshape(-1),
        ]
    )
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite cotangent")
    if solver == "cg":
        # CG on the normal equations H H^T lam = H r: symmetric PSD even at
        # loose fixed points, where diag(a,b) H loses diagonal dominance.
        rhs = jac.apply_h(r)

        def apply_nn(z):
            return jac.apply_h(jac.apply_ht(z))

        lam, res, ok = conjugate_gradient(
            apply_nn, rhs, tol=tol, max_iters=max_iters,
            project=jac.project_adjoint_kernel,
        )
        if not ok and res > max(tol * 10, 1e-9) * (1.0 + np.linalg.norm(rhs)):
            raise SolverStalled("IFT adjoint CG stalled", res)
    elif solver == "neumann":
        # eliminate the g block: (I - B^T A^T) lam_f = r_f - B^T r_g. The
        # reduced rhs has no component on the Perron eigendirection of
        # B^T A^T (its left eigenvector is 1 and sum r_f = sum r_g for
        # gauge-consistent cotangents), so the truncated series converges
        # geometrically at the squared Sinkhorn rate.
        r_f, r_g = jac.split(jac.project_shift(r))
        rt = r_f - jac.B.T @ r_g
        x = rt.copy()
        lam_f = rt.copy()
        for _ in range(max_iters):
            x = jac.B.T @ (jac.A.T @ x)
            lam_f = lam_f + x
        lam = np.concatenate([lam_f, r_g - jac.A.T @ lam_f])
    else:
        raise ValueError(f"unknown solver {solver!r}")
    lam = jac.project_adjoint_kernel(lam)
    return jac.split(lam)


def grad_positions_envelope(sol: SinkhornSolution) -> Tuple[np.ndarray, np.ndarray]:
    """Exact gradient of entropic_cost at the fixed point (Danskin):
    gX_i = 2 sum_j P_ij (x_i - y_j), gY_j = 2 sum_i P_ij (y_j - x_i)."""
    P = np.exp(sol.log_coupling)
    X, Y = sol.source.points, sol.target.points
    row = P.sum(axis=1)
    col = P.sum(axis=0)
    gX = 2.0 * (row[:, None] * X - P @ Y)
    gY = 2.0 * (col[:, None] * Y - P.T @ X)
    return gX, gY


def grad_positions_ift(
    sol: SinkhornSolution,
    solver: str = "cg",
    tol: float = 1e-12,
    max_iters: int = 2000,
) -> Tuple[np.ndarray, np.ndarray]:
    """Envelope term plus the adjoint correction for inexact fixed points.

    Solves H^T lam = (a, b); the correction driven by the marginal
    residual (a - P1, b - P^T1) vanishes at an exact fixed point, where
    this reduces to grad_positions_envelope.
    """
    jac = OptimalityJacobian(sol)
    row = jac.P.sum(axis=1)
    col = jac.P.sum(axis=0)
    resid_f = 0.5 * (jac.a - row)
    resid_g = 0.5 * (jac.b - col)
    df, dg = ift_adjoint_solve(
        sol, resid_f, resid_g, solver=solver, tol=tol, max_iters=max_iters, jac=jac
    )
    lam_f = 0.5 * jac.a + df
    lam_g = 0.5 * jac.b + dg
    # dV/dC_ij = lam_f_i A_ij + lam_g_j B_ji = P_ij (lam_f_i/a_i + lam_g_j/b_j)
    D = jac.P * (lam_f / jac.a)[:, None] + jac.P * (lam_g / jac.b)[None, :]
    X, Y = sol.source.points, sol.target.points
    s = D.sum(axis=1)
    t = D.sum(axis=0)
    gX = 2.0 * (s[:, None] * X - D @ Y)
    gY = 2.0 * (t[:, None] * Y - D.T @ X)
    return gX, gY


def unrolled_grad(
    src: ParticleCloud,
    dst: ParticleCloud,
    cfg: SinkhornConfig,
    L: int,
) -> Tuple[np.ndarray, np.ndarray, TapeCounter]:
    """Reverse-mode gradient of <a,f> + <b,g> after exactly L alternating
    half-updates from f = g = 0 (f first). The tape stores one N x M
    softmax matrix per half-update; cells_stored = L*N*M + N*M + N + M.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    a, b = src.weights, dst.weights
    X, Y = src.points, dst.points
    eps = cfg.epsilon
    C = cost_matrix(X, Y)
    loga, logb = np.log(a), np.log(b)
    n, m = src.n, dst.n

    f = np.zeros(n)
    g = np.zeros(m)
    tape = []
    for t in range(1, L + 1):
        if t % 2 == 1:
            T = logb[None, :] + (g[None, :] - C) / eps
            mx = T.max(axis=1, keepdims=True)
            E = np.exp(T - mx)
            s = E.sum(axis=1, keepdims=True)
            f = -eps * (mx[:, 0] + np.log(s[:, 0]))
            tape.append(("f", E / s))
        else:
            U = loga[:, None] + (f[:, None] - C) / eps
            mx = U.max(axis=0, keepdims=True)
            E = np.exp(U - mx)
            s = E.sum(axis=0, keepdims=True)
            g = -eps * (mx[0, :] + np.log(s[0, :]))
            tape.append(("g", E / s))

    lam_f = a.copy()
    lam_g = b.copy()
    dC = np.zeros_like(C)
    for kind, sigma in reversed(tape):
        if kind == "f":
            # f = -eps * LSE_j(logb + (g - C)/eps): df/dg = -sigma, df/dC = +sigma
            lam_g = lam_g - sigma.T @ lam_f
            dC += sigma * lam_f[:, None]
            lam_f = np.zeros(n)
        else:
            lam_f = lam_f - sigma @ lam_g
            dC += sigma * lam_g[None, :]
            lam_g = np.zeros(m)

    srow = dC.sum(axis=1)
    scol = dC.sum(axis=0)
    gX = 2.0 * (srow[:, None] * X - dC @ Y)
    gY = 2.0 * (scol[:, None] * Y - dC.T @ X)
    cells = L * n * m + n * m + n + m
    return gX, gY, TapeCounter(cells_stored=cells, iterations=L)


@dataclass(frozen=True)
class ConditionEstimate:
    kappa: float
    lambda_max: float
    lambda_min: float
    stalled: bool


def hessian_condition_estimate(
    sol: SinkhornSolution, iters: int = 2000
) -> ConditionEstimate:
    """kappa = lambda_max / lambda_min of the gauge-fixed H, estimated on
    the symmetrized operator D^{-1/2} diag(a,b) H D^{-1/2} (same spectrum).

    lambda_max by power iteration, lambda_min by shifted inverse
    iteration with inner CG solves; a stalled inner solve reports
    kappa = inf.
    """
    jac = OptimalityJacobian(sol)
    n = jac.n + jac.m
    lam_max = power_iteration(
        jac.apply_h_sym, n, iters=iters, tol=1e-14, project=jac.project_sym_kernel
    )
    try:
        lam_min = smallest_eigen_inverse_iteration(
            jac.apply_h_sym,
            n,
            iters=min(iters, 200),
            shift=max(lam_max, 1.0) * 1e-14,
            cg_tol=1e-13,
            cg_iters=max(iters, 4 * n),
            project=jac.project_sym_kernel,
        )
    except SolverStalled as exc:
        warnings.warn(f"lambda_min estimate stalled: {exc}", stacklevel=2)
        return ConditionEstimate(np.inf, lam_max, 0.0, True)
    if lam_min <= 0:
        return ConditionEstimate(np.inf, lam_max, lam_min, True)
    return ConditionEstimate(
        max(lam_max / lam_min, 1.0), lam_max, lam_min, False
    )
