"""Time grid, spatial domain, problem coefficients, and reproducible noise.

The solver discretises a forward/backward pair on the uniform partition
t_i = i*h of [0, T], h = T/N.  Two independent Brownian drivers feed the
scheme:

    B   forward noise, one d-dimensional path per Monte Carlo sample,
        increments ``dB[m, i]`` with coordinatewise variance h;
    W   external (backward) noise, a single l-dimensional path shared by
        every sample and every regression within a run, increments ``dW[i]``.

Increment generation is counter-based: every Gaussian coordinate owns a fixed
position in a Philox word stream keyed by (seed, stream), so any single
increment can be regenerated in isolation, bit-exactly, without materialising
the rest of the bundle.  Determinism is therefore independent of path order
and of thread scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

__all__ = [
    "BdsdeError",
    "InvalidParameterError",
    "InvalidStartError",
    "EvaluationError",
    "ConfigError",
    "TimeGrid",
    "build_grid",
    "Domain",
    "CoefficientSet",
    "NoiseBundle",
    "sample_noise",
]


# ------------------------------- Errors ----------------------------------- #

class BdsdeError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(BdsdeError, ValueError):
    """A constructor or operation received an out-of-contract argument."""


class InvalidStartError(InvalidParameterError):
    """The forward simulation start point is not inside the (shifted) domain."""


class EvaluationError(BdsdeError, ArithmeticError):
    """A user-supplied coefficient returned a non-finite or misshapen value."""


class ConfigError(BdsdeError):
    """An experiment configuration failed to parse or validate."""


# ------------------------------ Time grid --------------------------------- #

@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition t_i = i*h of [0, T] with N steps.

    ``times`` is computed as (i*T)/N so the right endpoint lands on T exactly
    instead of drifting by accumulated rounding; spacing is uniform to 1 ulp.
    """

    T: float
    N: int
    h: float
    times: np.ndarray

    def floor_time(self, s: float) -> float:
        """Largest grid time t_i <= s.  Raises for s outside [0, T]."""
        self._check_range(s)
        i = int(np.searchsorted(self.times, s, side="right")) - 1
        return float(self.times[max(i, 0)])

    def ceil_time(self, s: float) -> float:
        """Smallest grid time t_i >= s.  Raises for s outside [0, T]."""
        self._check_range(s)
        i = int(np.searchsorted(self.times, s, side="left"))
        return float(self.times[min(i, self.N)])

    def index_of(self, t: float) -> int:
        """Index i with times[i] == t up to 1e-9*h, else an error."""
        i = int(np.clip(np.round(t / self.h), 0, self.N))
        if abs(self.times[i] - t) > 1e-9 * self.h:
            raise InvalidParameterError(f"t={t!r} is not a grid time")
        return i

    def _check_range(self, s: float) -> None:
        if not (0.0 <= s <= self.T):
            raise InvalidParameterError(f"s={s!r} outside [0, {self.T}]")


def build_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid with step h = T/N.

    Raises
    ------
    InvalidParameterError
        For non-positive T or N < 1.
    """
    if not np.isfinite(T) or T <= 0:
        raise InvalidParameterError(f"horizon T must be positive, got {T!r}")
    if int(N) != N or N < 1:
        raise InvalidParameterError(f"step count N must be a positive integer, got {N!r}")
    N = int(N)
    times = (np.arange(N + 1, dtype=np.float64) * float(T)) / N
    times.setflags(write=False)
    return TimeGrid(T=float(T), N=N, h=float(T) / N, times=times)


# ------------------------------- Domain ----------------------------------- #

_WHOLE = "whole-space"
_BOX = "axis-box"


@dataclass(frozen=True)
class Domain:
    """Open spatial domain: either all of R^d or an open axis-aligned box."""

    kind: str
    lower: np.ndarray
    upper: np.ndarray

    @staticmethod
    def whole_space(d: int) -> "Domain":
        if d < 1:
            raise InvalidParameterError("dimension must be >= 1")
        lo = np.full(d, -np.inf)
        hi = np.full(d, np.inf)
        lo.setflags(write=False)
        hi.setflags(write=False)
        return Domain(kind=_WHOLE, lower=lo, upper=hi)

    @staticmethod
    def box(lower, upper) -> "Domain":
        lo = np.atleast_1d(np.asarray(lower, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(upper, dtype=np.float64)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidParameterError("bounds must be vectors of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise InvalidParameterError("box bounds must be finite")
        if not np.all(lo < hi):
            raise InvalidParameterError(f"need lower < upper componentwise, got {lo} vs {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        return Domain(kind=_BOX, lower=lo, upper=hi)

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    @property
    def is_whole_space(self) -> bool:
        return self.kind == _WHOLE

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Strict membership in the open domain; shape (...,) bool."""
        x = np.asarray(x, dtype=np.float64)
        if self.is_whole_space:
            return np.ones(x.shape[:-1], dtype=bool)
        return np.all(x > self.lower, axis=-1) & np.all(x < self.upper, axis=-1)

    def boundary_distance(self, x: np.ndarray) -> np.ndarray:
        """Distance to the nearest face (negative outside); +inf for R^d."""
        x = np.asarray(x, dtype=np.float64)
        if self.is_whole_space:
            return np.full(x.shape[:-1], np.inf)
        gaps = np.concatenate([x - self.lower, self.upper - x], axis=-1)
        return np.min(gaps, axis=-1)

    def inward_normal(self, x: np.ndarray) -> np.ndarray:
        """Unit inward normal of the nearest face, shape (..., d).

        Faces are scanned as (coord 0 lower, ..., coord d-1 lower,
        coord 0 upper, ...); the first minimal gap wins, so corner ties break
        toward the lowest coordinate index and, within a coordinate, toward
        the lower face.  Undefined (error) for the whole space.
        """
        if self.is_whole_space:
            raise InvalidParameterError("whole-space domain has no boundary normal")
        x = np.asarray(x, dtype=np.float64)
        gaps = np.concatenate([x - self.lower, self.upper - x], axis=-1)
        face = np.argmin(gaps, axis=-1)
        d = self.d
        normal = np.zeros(x.shape[:-1] + (d,))
        coord = np.where(face < d, face, face - d)
        sign = np.where(face < d, 1.0, -1.0)
        np.put_along_axis(normal, coord[..., None], sign[..., None], axis=-1)
        return normal


# ----------------------------- Coefficients -------------------------------- #

# Vectorisation contract for the user-supplied callables (leading axis = the
# Monte Carlo sample axis of length M):
#   b(x)            (M, d) -> (M, d)
#   sigma(x)        (M, d) -> (M, d, d)
#   f(t, x, y, z)   scalar t, (M, d), (M, k), (M, k, d) -> (M, k)
#   g(t, x, y, z)   scalar t, (M, d), (M, k), (M, k, d) -> (M, k, l)
#   phi(t, x)       scalar or (M,) t, (M, d) -> (M, k)

Driver = Callable[..., np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    """Problem data (b, sigma, f, g, phi) with dimension metadata.

    ``g=None`` means the external-noise coefficient is absent (plain backward
    equation).  ``metadata`` may record documented Lipschitz/monotonicity
    constants; it is informational only and never enforced.
    """

    d: int
    k: int
    l: int
    b: Driver
    sigma: Driver
    f: Driver
    phi: Driver
    g: Optional[Driver] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, v in (("d", self.d), ("k", self.k), ("l", self.l)):
            if int(v) != v or v < 1:
                raise InvalidParameterError(f"dimension {name} must be a positive integer")

    # Each eval_* wrapper enforces the output shape and finiteness lazily,
    # naming the offending coefficient as required by the error contract.

    def eval_b(self, x: np.ndarray) -> np.ndarray:
        return _checked("b", self.b(x), x.shape[:-1] + (self.d,), x)

    def eval_sigma(self, x: np.ndarray) -> np.ndarray:
        return _checked("sigma", self.sigma(x), x.shape[:-1] + (self.d, self.d), x)

    def eval_f(self, t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return _checked("f", self.f(t, x, y, z), x.shape[:-1] + (self.k,), x)

    def eval_g(self, t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.g is None:
            raise InvalidParameterError("coefficient g is not configured")
        return _checked("g", self.g(t, x, y, z), x.shape[:-1] + (self.k, self.l), x)

    def eval_phi(self, t, x: np.ndarray) -> np.ndarray:
        return _checked("phi", self.phi(t, x), x.shape[:-1] + (self.k,), x)


def _checked(name: str, out, shape: tuple, x: np.ndarray) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if out.shape != shape:
        raise EvaluationError(f"coefficient {name} returned shape {out.shape}, expected {shape}")
    if not np.isfinite(out).all():
        bad = np.argwhere(~np.isfinite(out))[0]
        where = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        sample = where[min(int(bad[0]), where.shape[0] - 1)] if where.size else None
        raise EvaluationError(f"coefficient {name} returned a non-finite value at index {tuple(bad)} (x={sample})")
    return out


# -------------------------------- Noise ------------------------------------ #

_FORWARD_STREAM = 0
_BACKWARD_STREAM = 1
_U64 = np.uint64


def _gaussian_words(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """``count`` standard Gaussians from word positions start..start+count-1.

    Philox emits 4 words per counter block, so the generator is positioned on
    the block containing ``start`` and the offset is trimmed.  Each word maps
    through u = ((w >> 11) + 0.5) * 2^-53 (strictly inside (0,1)) and the
    inverse normal CDF; one word per Gaussian, so positions never shift.
    """
    block, offset = divmod(start, 4)
    key = int(seed) + (int(stream) << 64)
    bg = np.random.Philox(key=key, counter=block)
    raw = bg.random_raw(offset + count)[offset:]
    u = ((raw >> _U64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments for one run: forward (M, N, d), backward (N, l).

    Every coordinate is N(0, h).  ``forward_increment``/``backward_increment``
    regenerate single entries from scratch and match the stored arrays
    bit-exactly (counter-based layout; see module docstring).
    """

    seed: int
    grid: TimeGrid
    M: int
    d: int
    l: int
    forward: np.ndarray
    backward: np.ndarray
    backward_injected: bool = False

    def forward_increment(self, m: int, i: int) -> np.ndarray:
        """Regenerate dB[m, i] (shape (d,)) without touching the bundle."""
        if not (0 <= m < self.M and 0 <= i < self.grid.N):
            raise InvalidParameterError(f"increment index ({m}, {i}) out of range")
        start = (m * self.grid.N + i) * self.d
        z = _gaussian_words(self.seed, _FORWARD_STREAM, start, self.d)
        return z * np.sqrt(self.grid.h)

    def backward_increment(self, i: int) -> np.ndarray:
        """Regenerate dW[i] (shape (l,)); stored row if the path was injected."""
        if not 0 <= i < self.grid.N:
            raise InvalidParameterError(f"increment index {i} out of range")
        if self.backward_injected:
            return self.backward[i].copy()
        z = _gaussian_words(self.seed, _BACKWARD_STREAM, i * self.l, self.l)
        return z * np.sqrt(self.grid.h)

    def with_backward(self, dW: np.ndarray) -> "NoiseBundle":
        """Copy of this bundle with the shared backward path replaced.

        Used by the pointwise field evaluation layer, which must reuse one
        externally supplied W segment across many solves.
        """
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != (self.grid.N, self.l):
            raise InvalidParameterError(f"backward path shape {dW.shape}, expected {(self.grid.N, self.l)}")
        if not np.isfinite(dW).all():
            raise InvalidParameterError("backward path contains non-finite entries")
        dW = dW.copy()
        dW.setflags(write=False)
        return replace(self, backward=dW, backward_injected=True)


def sample_noise(seed: int, M: int, grid: TimeGrid, d: int, l: int) -> NoiseBundle:
    """Draw the full increment bundle for one run.

    Forward words are laid out C-contiguously as (m, i, coordinate) on stream
    0, the single shared backward path as (i, coordinate) on stream 1, so the
    output is identical for identical arguments regardless of how the caller
    parallelises the surrounding computation.
    """
    if int(M) != M or M < 1:
        raise InvalidParameterError(f"path count M must be a positive integer, got {M!r}")
    if int(seed) != seed or not 0 <= seed < 2 ** 64:
        raise InvalidParameterError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    if d < 1 or l < 1:
        raise InvalidParameterError("dimensions d and l must be >= 1")
    M, d, l = int(M), int(d), int(l)
    root_h = np.sqrt(grid.h)

    fwd = _gaussian_words(seed, _FORWARD_STREAM, 0, M * grid.N * d)
    fwd = (fwd * root_h).reshape(M, grid.N, d)
    bwd = _gaussian_words(seed, _BACKWARD_STREAM, 0, grid.N * l)
    bwd = (bwd * root_h).reshape(grid.N, l)
    fwd.setflags(write=False)
    bwd.setflags(write=False)
    return NoiseBundle(seed=int(seed), grid=grid, M=M, d=d, l=l, forward=fwd, backward=bwd)
