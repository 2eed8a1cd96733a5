"""Independent reference computations used to freeze expected values.

These deliberately avoid the library's own code paths wherever possible:
the LP oracle solves the exact (unregularized) transport problem with a
generic simplex/IPM solver, finite differences probe values only, and
the dense oracles assemble full matrices for eigensolves.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.optimize import linprog


def squared_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)


def lp_transport_cost(X, Y, a=None, b=None) -> float:
    """Exact optimal transport cost by linear programming (HiGHS)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, m = X.shape[0], Y.shape[0]
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=float)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=float)
    C = squared_distances(X, Y).ravel()
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(m):
            k = i * m + j
            rows.append(i)
            cols.append(k)
            vals.append(1.0)
            rows.append(n + j)
            cols.append(k)
            vals.append(1.0)
    A_eq = sparse.csr_matrix((vals, (rows, cols)), shape=(n + m, n * m))
    b_eq = np.concatenate([a, b])
    # drop one redundant constraint for numerical comfort
    res = linprog(C, A_eq=A_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def fd_gradient(value, X0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    X0 = np.asarray(X0, dtype=float)
    g = np.zeros_like(X0)
    for idx in np.ndindex(X0.shape):
        Xp, Xm = X0.copy(), X0.copy()
        Xp[idx] += h
        Xm[idx] -= h
        g[idx] = (value(Xp) - value(Xm)) / (2 * h)
    return g


def dense_operator_matrix(apply_op, dim: int) -> np.ndarray:
    """Assembles a linear operator column by column."""
    M = np.zeros((dim, dim))
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = 1.0
        M[:, k] = apply_op(e)
    return M
