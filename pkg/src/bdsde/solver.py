"""Backward induction for the discrete doubly stochastic scheme.

With per-path forward increments dB and one shared backward increment
path dW, the recursion over n = N-1..0 reads

    y_N = phi(exit_time, exit_state)                        (all paths)
    z_n = E_n[ (y_{n+1} + g_{n+1} dW_n) dB_n^T ] / h        (live paths)
    y_n = E_n[ y_{n+1} ] + 1_live ( h E_n[ f_n ] + E_n[ g_{n+1} dW_n ] )

where g_{n+1} = g(t_{n+1}, X_{n+1}, y_{n+1}, z_{n+1}(X_{n+1})) and
f_n = f(t_n, X_n, y_n, z_n(X_n)).  E_n is the hypercube regression at
the time-n states; z is explicit while the implicit y equation is run
through a short Picard loop started at zero.  Paths that exited carry
their frozen terminal value through the y-regression population but are
excluded from the z- and driver-regressions, and their realized z is
zero.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, IO, Optional, Sequence, Union

import numpy as np

from .forward import PathSet, simulate_stopped
from .model import (
    BdsdeError,
    CoefficientSet,
    Domain,
    EvaluationError,
    InvalidParameterError,
    NoiseBundle,
    TimeGrid,
)
from .regression import CellFunction, HypercubePartition, project

Array = np.ndarray

__all__ = [
    "MODES",
    "SolverConfig",
    "SolverDiagnostics",
    "BackwardSolution",
    "terminal_values",
    "z_step",
    "y_step",
    "backward_induction",
    "solve",
    "strong_error",
    "dump_diagnostics",
]

MODES = ("bsde", "bdsde-fixed-horizon", "bdsde-random-terminal")


# ------------------------------ configuration ------------------------------ #

@dataclasses.dataclass(frozen=True)
class SolverConfig:
    """Mode and Picard depth of the backward pass.

    bsde drops the backward noise term entirely (g is forced off the data
    path, so results cannot depend on dW even bitwise); bdsde-fixed-horizon
    keeps g but never stops paths; bdsde-random-terminal stops paths at the
    domain exit.
    """

    mode: str
    picard_iterations: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(
                f"unknown mode {self.mode!r}, expected one of {MODES}"
            )
        if int(self.picard_iterations) != self.picard_iterations or self.picard_iterations < 0:
            raise InvalidParameterError(
                f"picard_iterations must be a nonnegative integer, got {self.picard_iterations!r}"
            )


@dataclasses.dataclass(frozen=True)
class SolverDiagnostics:
    empty_cells_y: Array       # (N+1,) per-step empty-cell count of the y fit
    empty_cells_z: Array       # (N,)
    picard_residuals: Array    # (N, I) sup-norm coefficient moves per iteration
    exit_fraction: float


@dataclasses.dataclass(frozen=True)
class BackwardSolution:
    """Fitted cell functions, realized per-path values, and t=0 readout."""

    config: SolverConfig
    paths: PathSet
    y_funcs: tuple               # length N+1
    z_funcs: tuple               # length N
    y_values: Array              # (N+1, M, k)
    z_values: Array              # (N+1, M, k, d); index N is identically zero
    Y0: Array                    # (k,)
    Z0: Array                    # (k, d)
    diagnostics: SolverDiagnostics


# ------------------------------ scheme pieces ------------------------------ #

def terminal_values(paths: PathSet, coeffs: CoefficientSet) -> Array:
    """Payoff at each path's stopping point, phi(exit_time, exit_state).

    Exit times vary per path, so evaluation is grouped by exit index; a
    non-finite payoff is reported with the offending path index.
    """
    out = np.empty((paths.M, coeffs.k))
    states = paths.states
    for e in np.unique(paths.exit_index):
        sel = np.nonzero(paths.exit_index == e)[0]
        vals = np.asarray(coeffs.phi(float(paths.grid.times[e]), states[sel, e]),
                          dtype=np.float64)
        if vals.shape != (sel.size, coeffs.k):
            raise EvaluationError(
                f"phi returned shape {vals.shape}, expected {(sel.size, coeffs.k)}"
            )
        bad = ~np.isfinite(vals).all(axis=1)
        if bad.any():
            raise EvaluationError(
                f"non-finite terminal value at path {int(sel[bad][0])}"
            )
        out[sel] = vals
    return out


def _g_term(
    coeffs: CoefficientSet,
    t_next: float,
    x_next: Array,
    y_next: Array,
    z_next: Optional[CellFunction],
    dW_n: Array,
    live: Array,
) -> Array:
    """Per-path g(t_{n+1}, X_{n+1}, y_{n+1}, z_{n+1}(X_{n+1})) dW_n.

    Zero rows for exited paths and identically zero when no g is present.
    z_next is None at the last step, where the scheme's z is zero.
    """
    out = np.zeros_like(y_next)
    if coeffs.g is None or not live.any():
        return out
    xs = x_next[live]
    if z_next is None:
        zv = np.zeros((xs.shape[0], coeffs.k, coeffs.d))
    else:
        zv = z_next.evaluate(xs)
    gv = coeffs.eval_g(t_next, xs, y_next[live], zv)
    out[live] = gv @ np.asarray(dW_n, dtype=np.float64)
    return out


def z_step(
    n: int,
    paths: PathSet,
    y_next: Array,
    z_next: Optional[CellFunction],
    dB_n: Array,
    dW_n: Array,
    coeffs: CoefficientSet,
    partition: HypercubePartition,
) -> tuple:
    """Explicit regression for z at step n.

    Live-path targets (y_{n+1} + g dW_n) dB_n^T / h are projected at the
    time-n states; the fit population is live paths only.  Returns the
    fitted CellFunction and realized values (zero rows for exited paths).
    """
    grid = paths.grid
    live = paths.live_mask(n)
    x_n = paths.states[:, n]
    g_term = _g_term(coeffs, float(grid.times[n + 1]), paths.states[:, n + 1],
                     y_next, z_next, dW_n, live)
    M, k = y_next.shape
    d = paths.states.shape[-1]
    targets = np.zeros((M, k, d))
    targets[live] = ((y_next[live] + g_term[live])[:, :, None]
                     * np.asarray(dB_n, dtype=np.float64)[live, None, :] / grid.h)
    z_fn = project(partition, x_n, targets, mask=live)
    realized = np.zeros((M, k, d))
    if live.any():
        realized[live] = z_fn.evaluate(x_n[live])
    return z_fn, realized


def y_step(
    n: int,
    paths: PathSet,
    y_next: Array,
    z_n: Array,
    z_next: Optional[CellFunction],
    dW_n: Array,
    coeffs: CoefficientSet,
    partition: HypercubePartition,
    picard_iterations: int,
) -> tuple:
    """Implicit regression for y at step n via Picard iteration from zero.

    Every path contributes to the fit population: live paths carry the
    full target y_{n+1} + h f + g dW_n, exited paths carry their frozen
    value so the conditional-mean term survives for their cells.  With
    zero iterations the projection of the explicit part is returned and
    f never enters.  Returns (CellFunction, realized values, residuals).
    """
    grid = paths.grid
    live = paths.live_mask(n)
    x_n = paths.states[:, n]
    g_term = _g_term(coeffs, float(grid.times[n + 1]), paths.states[:, n + 1],
                     y_next, z_next, dW_n, live)
    base = y_next.copy()
    base[live] += g_term[live]

    residuals = np.zeros(picard_iterations)
    if picard_iterations == 0:
        y_fn = project(partition, x_n, base)
    else:
        y_prev = np.zeros_like(y_next)
        prev_coeffs = np.zeros((partition.total_cells, coeffs.k))
        t_n = float(grid.times[n])
        for it in range(picard_iterations):
            tgt = base.copy()
            if live.any():
                fv = coeffs.eval_f(t_n, x_n[live], y_prev[live], z_n[live])
                tgt[live] += grid.h * fv
            y_fn = project(partition, x_n, tgt)
            residuals[it] = float(np.max(np.abs(y_fn.coefficients - prev_coeffs)))
            prev_coeffs = y_fn.coefficients
            y_prev = y_fn.evaluate(x_n)
    realized = y_next.copy()
    if live.any():
        realized[live] = y_fn.evaluate(x_n[live])
    return y_fn, realized, residuals


# ------------------------------ full recursion ----------------------------- #

def backward_induction(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    paths: PathSet,
    noise: NoiseBundle,
    partition: HypercubePartition,
    config: SolverConfig,
    *,
    terminal: Optional[Array] = None,
) -> BackwardSolution:
    """Run the full backward pass over an existing PathSet.

    ``terminal`` overrides the payoff-based terminal values with an
    arbitrary per-path vector; the equivalence transformation to an
    ordinary backward equation relies on this hook.
    """
    if noise.M != paths.M:
        raise InvalidParameterError(
            f"noise holds {noise.M} paths but the path set holds {paths.M}"
        )
    if config.mode != "bsde" and coeffs.g is None:
        raise InvalidParameterError(
            f"mode {config.mode!r} needs a g coefficient; none was supplied"
        )
    run_coeffs = dataclasses.replace(coeffs, g=None) if config.mode == "bsde" else coeffs

    N, M, k, d = grid.N, paths.M, coeffs.k, coeffs.d
    I = int(config.picard_iterations)

    if terminal is None:
        term = terminal_values(paths, run_coeffs)
    else:
        term = np.asarray(terminal, dtype=np.float64)
        if term.shape != (M, k):
            raise InvalidParameterError(
                f"terminal override shape {term.shape}, expected {(M, k)}"
            )
        if not np.isfinite(term).all():
            raise InvalidParameterError("terminal override contains non-finite entries")

    y_values = np.empty((N + 1, M, k))
    z_values = np.zeros((N + 1, M, k, d))
    y_values[N] = term
    y_funcs: list = [None] * (N + 1)
    z_funcs: list = [None] * N
    empty_y = np.zeros(N + 1, dtype=np.int64)
    empty_z = np.zeros(N, dtype=np.int64)
    residuals = np.zeros((N, I))

    y_funcs[N] = project(partition, paths.states[:, N], term)
    empty_y[N] = y_funcs[N].empty_cells

    z_next: Optional[CellFunction] = None
    for n in range(N - 1, -1, -1):
        try:
            z_fn, z_real = z_step(n, paths, y_values[n + 1], z_next,
                                  noise.forward[:, n], noise.backward[n],
                                  run_coeffs, partition)
            y_fn, y_real, res = y_step(n, paths, y_values[n + 1], z_real, z_next,
                                       noise.backward[n], run_coeffs, partition, I)
        except BdsdeError as err:
            raise type(err)(f"backward step n={n}: {err}") from err
        z_funcs[n] = z_fn
        z_values[n] = z_real
        y_funcs[n] = y_fn
        y_values[n] = y_real
        empty_z[n] = z_fn.empty_cells
        empty_y[n] = y_fn.empty_cells
        residuals[n] = res
        z_next = z_fn

    x0 = paths.states[:1, 0]
    Y0 = y_funcs[0].evaluate(x0)[0]
    Z0 = z_funcs[0].evaluate(x0)[0]

    for a in (y_values, z_values, empty_y, empty_z, residuals):
        a.setflags(write=False)
    diagnostics = SolverDiagnostics(
        empty_cells_y=empty_y,
        empty_cells_z=empty_z,
        picard_residuals=residuals,
        exit_fraction=float(paths.exit_detected.mean()),
    )
    return BackwardSolution(
        config=config, paths=paths,
        y_funcs=tuple(y_funcs), z_funcs=tuple(z_funcs),
        y_values=y_values, z_values=z_values,
        Y0=Y0, Z0=Z0, diagnostics=diagnostics,
    )


def solve(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    domain: Domain,
    noise: NoiseBundle,
    x0,
    partition: HypercubePartition,
    config: SolverConfig,
    *,
    shift_enabled: bool = True,
) -> BackwardSolution:
    """Simulate forward paths and run the backward recursion.

    Only bdsde-random-terminal stops paths at the domain boundary; the
    other modes simulate in the whole space, which makes fixed-horizon
    runs with a whole-space domain bitwise identical to random-terminal
    ones.
    """
    if config.mode == "bdsde-random-terminal":
        sim_domain = domain
    else:
        sim_domain = Domain.whole_space(coeffs.d)
    paths = simulate_stopped(coeffs, grid, sim_domain, noise, x0,
                             shift_enabled=shift_enabled)
    return backward_induction(coeffs, grid, paths, noise, partition, config)


# ------------------------------ error metric ------------------------------- #

def strong_error(
    solution: BackwardSolution,
    reference_y: Callable[[float, Array], Array],
    reference_z: Callable[[float, Array], Array],
) -> float:
    """Empirical squared strong error against reference (t, x) maps.

    max over time steps of the pre-exit sample mean of |y_ref - y_n|^2,
    plus the Riemann sum h * sum_n of the pre-exit mean of the squared
    Frobenius gap in z.  Steps with no pre-exit path are skipped.
    """
    paths = solution.paths
    grid = paths.grid
    worst_y = 0.0
    z_sum = 0.0
    for n in range(grid.N):
        live = paths.live_mask(n)
        if not live.any():
            continue
        x = paths.states[live, n]
        t = float(grid.times[n])
        dy = np.asarray(reference_y(t, x), dtype=np.float64) - solution.y_values[n][live]
        worst_y = max(worst_y, float(np.mean(np.sum(dy * dy, axis=-1))))
        dz = np.asarray(reference_z(t, x), dtype=np.float64) - solution.z_values[n][live]
        z_sum += grid.h * float(np.mean(np.sum(dz * dz, axis=(-2, -1))))
    return worst_y + z_sum


# ------------------------------ diagnostics -------------------------------- #

def dump_diagnostics(solution: BackwardSolution, out: Union[str, IO[str]]) -> None:
    """Per-step Picard residuals and empty-cell counts as CSV."""
    res = solution.diagnostics.picard_residuals
    empty = solution.diagnostics.empty_cells_y

    def _write(fh: IO[str]) -> None:
        fh.write("n,picard_iter,residual,empty_cells\n")
        for n in range(res.shape[0]):
            for it in range(res.shape[1]):
                fh.write(f"{n},{it + 1},{'%.10g' % res[n, it]},{empty[n]}\n")

    if isinstance(out, str):
        with open(out, "w", newline="") as fh:
            _write(fh)
    else:
        _write(out)
