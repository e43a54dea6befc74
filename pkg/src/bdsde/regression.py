"""Hypercube indicator basis and empirical least-squares projection.

Conditional expectations in the backward scheme are approximated by
projecting Monte Carlo targets onto indicator functions of a hypercube
partition of [d1, d2).  Because the indicators are orthogonal under the
empirical scalar product, the projection coefficients reduce to per-cell
arithmetic means; ``lsq_oracle`` recomputes them through the assembled
normal equations as an independent cross-check.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .model import EvaluationError, InvalidParameterError

Array = np.ndarray

__all__ = [
    "HypercubePartition",
    "CellFunction",
    "build_partition",
    "project",
    "lsq_oracle",
]


# ------------------------------- partition --------------------------------- #

@dataclasses.dataclass(frozen=True)
class HypercubePartition:
    """Axis-aligned grid of half-open cells covering [d1, d2).

    Cell k along each axis is [d1 + k*delta, d1 + (k+1)*delta), except the
    last, which is truncated at d2 when the extent is not a multiple of
    delta.  Cells are numbered in C order.
    """

    d1: Array            # (d,)
    d2: Array            # (d,)
    delta: float
    L_per_dim: Array     # (d,) int64
    total_cells: int

    @property
    def d(self) -> int:
        return self.d1.shape[0]

    def cell_index(self, x: Array) -> Array:
        """Flat cell index for each row of x, or -1 outside [d1, d2)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise InvalidParameterError(
                f"points must have shape (M, {self.d}), got {x.shape}"
            )
        inside = np.all((x >= self.d1) & (x < self.d2), axis=1)
        j = np.floor((x - self.d1) / self.delta).astype(np.int64)
        # float roundoff near d2 can push floor to L; the truncated last
        # cell absorbs it
        np.clip(j, 0, self.L_per_dim - 1, out=j)
        flat = np.ravel_multi_index(tuple(j.T), tuple(self.L_per_dim))
        return np.where(inside, flat, np.int64(-1))


def build_partition(d1, d2, delta: float) -> HypercubePartition:
    """Partition [d1, d2) into ceil((d2 - d1)/delta) cells per dimension."""
    d1 = np.atleast_1d(np.asarray(d1, dtype=np.float64))
    d2 = np.atleast_1d(np.asarray(d2, dtype=np.float64))
    if d1.shape != d2.shape or d1.ndim != 1:
        raise InvalidParameterError(
            f"bound shapes differ or are not vectors: {d1.shape} vs {d2.shape}"
        )
    if not np.all(d1 < d2):
        raise InvalidParameterError("lower bounds must be strictly below upper bounds")
    if not (np.isfinite(delta) and delta > 0.0):
        raise InvalidParameterError(f"cell edge must be positive, got delta={delta}")
    L = np.ceil((d2 - d1) / delta).astype(np.int64)
    L = np.maximum(L, 1)
    d1.setflags(write=False)
    d2.setflags(write=False)
    L.setflags(write=False)
    return HypercubePartition(
        d1=d1, d2=d2, delta=float(delta), L_per_dim=L,
        total_cells=int(np.prod(L)),
    )


# ------------------------------ cell function ------------------------------ #

@dataclasses.dataclass(frozen=True)
class CellFunction:
    """Piecewise-constant function with one coefficient vector per cell.

    Evaluation outside [d1, d2) returns zero; no clamping, so a point that
    escapes the basis range shows up as a hard zero rather than a silently
    extrapolated value.  empty_cells and out_of_range_samples record how the
    fit was built and are carried into solver diagnostics.
    """

    partition: HypercubePartition
    coefficients: Array          # (total_cells, *value_shape)
    empty_cells: int = 0
    out_of_range_samples: int = 0

    @property
    def value_shape(self) -> tuple:
        return self.coefficients.shape[1:]

    def evaluate(self, x: Array) -> Array:
        idx = self.partition.cell_index(x)
        out = self.coefficients[np.maximum(idx, 0)].copy()
        out[idx < 0] = 0.0
        return out


# ------------------------------- projection -------------------------------- #

def _validate_samples(
    partition: HypercubePartition,
    xs: Array,
    vs: Array,
    mask: Optional[Array],
) -> tuple:
    xs = np.asarray(xs, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    M = xs.shape[0]
    if M < 1:
        raise InvalidParameterError("projection needs at least one sample")
    if vs.shape[0] != M:
        raise InvalidParameterError(
            f"sample and target counts differ: {M} vs {vs.shape[0]}"
        )
    if vs.ndim < 2:
        vs = vs[:, None]
    if mask is None:
        mask = np.ones(M, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (M,):
            raise InvalidParameterError(f"mask shape {mask.shape}, expected ({M},)")
    bad = mask & ~np.isfinite(vs.reshape(M, -1)).all(axis=1)
    if bad.any():
        m = int(np.nonzero(bad)[0][0])
        raise EvaluationError(f"non-finite regression target at sample {m}")
    return xs, vs, mask


def project(
    partition: HypercubePartition,
    xs: Array,
    vs: Array,
    mask: Optional[Array] = None,
) -> CellFunction:
    """Empirical least-squares fit of targets vs onto the indicator basis.

    Coefficients are per-cell means of the masked-in targets; cells that
    receive no masked-in sample get the zero vector and are counted in
    ``empty_cells``.  A masked-in sample outside [d1, d2) is dropped from
    the fit and counted in ``out_of_range_samples``.
    """
    xs, vs, mask = _validate_samples(partition, xs, vs, mask)
    M = xs.shape[0]
    vshape = vs.shape[1:]
    flat = vs.reshape(M, -1)

    cells = partition.cell_index(xs)
    use = mask & (cells >= 0)
    out_of_range = int(np.count_nonzero(mask & (cells < 0)))

    total = partition.total_cells
    counts = np.bincount(cells[use], minlength=total)
    coeffs = np.zeros((total, flat.shape[1]))
    occupied = counts > 0
    for col in range(flat.shape[1]):
        sums = np.bincount(cells[use], weights=flat[use, col], minlength=total)
        coeffs[occupied, col] = sums[occupied] / counts[occupied]
    return CellFunction(
        partition=partition,
        coefficients=coeffs.reshape((total,) + vshape),
        empty_cells=int(total - np.count_nonzero(occupied)),
        out_of_range_samples=out_of_range,
    )


def lsq_oracle(
    partition: HypercubePartition,
    xs: Array,
    vs: Array,
    mask: Optional[Array] = None,
) -> Array:
    """Indicator-basis least squares via assembled normal equations.

    Builds the dense M x L design matrix, forms the Gram matrix and
    right-hand side explicitly and solves with a min-norm SVD fallback so
    empty cells come out zero.  Quadratic in the cell count; intended for
    cross-checking ``project`` on small instances, not production fits.
    """
    xs, vs, mask = _validate_samples(partition, xs, vs, mask)
    M = xs.shape[0]
    vshape = vs.shape[1:]
    flat = vs.reshape(M, -1)

    cells = partition.cell_index(xs)
    use = mask & (cells >= 0)
    design = (cells[:, None] == np.arange(partition.total_cells)[None, :])
    design = design.astype(np.float64) * use[:, None]
    gram = design.T @ design
    rhs = design.T @ flat
    sol, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    return sol.reshape((partition.total_cells,) + vshape)
