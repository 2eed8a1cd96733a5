"""Empirical measures as weighted particle clouds, plus CSV ingestion.

File format: header ``x0,...,x{D-1}[,w]``; values written with 17
significant digits so a store/load round trip is lossless for float64.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .graph import Mechanism

WEIGHT_SUM_TOL = 1e-12


class CloudFormatError(ValueError):
    """Raised on malformed cloud files; carries row/column context."""


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted point set: points (N, D), weights (N,) summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if pts.shape[0] < 1:
            raise ValueError("cloud needs at least one particle")
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite particle coordinates")
        if np.any(w < 0):
            raise ValueError("negative weights")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        w = np.ascontiguousarray(w)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "ParticleCloud":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points) -> "ParticleCloud":
        return ParticleCloud(points, self.weights)


def sample_gaussian(mean, cov_diag, n: int, seed: int) -> ParticleCloud:
    """n iid draws from a diagonal Gaussian, uniform weights, seeded."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov_diag, dtype=np.float64).reshape(-1)
    if n < 1:
        raise ValueError("n must be >= 1")
    if cov.shape != mean.shape:
        raise ValueError("mean and cov_diag dims differ")
    if np.any(cov < 0):
        raise ValueError("cov_diag must be nonnegative")
    rng = np.random.default_rng(seed)
    pts = mean + rng.standard_normal((n, mean.shape[0])) * np.sqrt(cov)
    return ParticleCloud.uniform(pts)


def pushforward(c: ParticleCloud, m: Mechanism) -> ParticleCloud:
    """Map every particle through the mechanism; weights unchanged."""
    return ParticleCloud(m.apply(c.points), c.weights)


def center_of_mass(c: ParticleCloud) -> np.ndarray:
    return c.weights @ c.points


def total_variance(c: ParticleCloud) -> float:
    """Trace of the weighted covariance: sum_i w_i ||x_i - COM||^2."""
    d = c.points - center_of_mass(c)
    return float(c.weights @ np.einsum("ij,ij->i", d, d))


def store_cloud(c: ParticleCloud, path, fmt: str = "csv") -> None:
    if fmt != "csv":
        raise ValueError(f"unsupported format {fmt!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k}" for k in range(c.dim)] + ["w"])
        for row, w in zip(c.points, c.weights):
            writer.writerow([f"{v:.17g}" for v in row] + [f"{w:.17g}"])


def load_cloud(path, fmt: str = "csv") -> ParticleCloud:
    """Reads a cloud CSV; a trailing ``w`` column is renormalized to sum 1."""
    if fmt != "csv":
        raise ValueError(f"unsupported format {fmt!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CloudFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        has_w = header[-1] == "w"
        coord_cols = header[:-1] if has_w else header
        expected = [f"x{k}" for k in range(len(coord_cols))]
        if coord_cols != expected:
            raise CloudFormatError(
                f"{path}: header {header} does not match x0..x{len(coord_cols) - 1}[,w]"
            )
        pts, ws = [], []
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CloudFormatError(
                    f"{path}: row {i} has {len(row)} columns, expected {len(header)}"
                )
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                bad = next(
                    (header[j] for j, v in enumerate(row) if not _is_float(v)), "?"
                )
                raise CloudFormatError(
                    f"{path}: row {i}, column {bad}: {exc}"
                ) from None
            if has_w:
                pts.append(vals[:-1])
                ws.append(vals[-1])
            else:
                pts.append(vals)
    if not pts:
        raise CloudFormatError(f"{path}: no data rows")
    pts = np.asarray(pts, dtype=np.float64)
    if has_w:
        w = np.asarray(ws, dtype=np.float64)
        if np.any(w < 0):
            raise CloudFormatError(f"{path}: negative weight")
        total = w.sum()
        if total <= 0:
            raise CloudFormatError(f"{path}: weights sum to {total}")
        if abs(total - 1.0) > 1e-6:
            warnings.warn(
                f"{path}: weights summed to {total:.6g}; renormalized to 1",
                stacklevel=2,
            )
        return ParticleCloud(pts, w / total)
    return ParticleCloud.uniform(pts)


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False
