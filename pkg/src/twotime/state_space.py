"""Discretized one-dimensional position space.

Kernels carry the grid measure: a state's norm is ``sum(|psi|**2) * dx`` and a
density matrix's trace is ``sum(diag(rho)) * dx``, so that continuum integrals
and grid sums agree. Units follow hbar = 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy.special import erfc

from .errors import (
    GridTooCoarse,
    OutOfRange,
    PreconditionError,
    ResolutionBelowGrid,
    SupportOverflow,
    ZeroWeightOutcome,
)

NORM_TOL = 1e-10
HERMITIAN_TOL = 1e-12
UNDERFLOW = 1e-300
# fraction of the grid, at each edge, watched for wrap-around contamination
BOUNDARY_BAND = 1 / 16
# relative offset (in units of dx) used when mapping interval ends to grid points
_SNAP = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PositionGrid:
    """Uniform periodic grid ``x_k = x_min + k*dx`` for ``k < n_points``."""

    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        n = self.n_points
        if n < 8 or n & (n - 1):
            raise PreconditionError(f"n_points must be a power of two >= 8, got {n}")
        if not self.x_max > self.x_min:
            raise PreconditionError("x_max must exceed x_min")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return self.width / self.n_points

    @cached_property
    def x(self) -> np.ndarray:
        return _frozen(self.x_min + self.dx * np.arange(self.n_points))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return _frozen(2 * np.pi * np.fft.fftfreq(self.n_points, self.dx))

    def index_range(self, lo: float, hi: float) -> tuple[int, int]:
        """Indices ``[k_lo, k_hi)`` of grid points inside the half-open ``[lo, hi)``."""
        k_lo = math.ceil((lo - self.x_min) / self.dx - _SNAP)
        k_hi = math.ceil((hi - self.x_min) / self.dx - _SNAP)
        n = self.n_points
        return min(max(k_lo, 0), n), min(max(k_hi, 0), n)

    def indicator(self, intervals: Sequence[tuple[float, float]]) -> np.ndarray:
        out = np.zeros(self.n_points)
        for lo, hi in intervals:
            k_lo, k_hi = self.index_range(lo, hi)
            out[k_lo:k_hi] = 1.0
        return out

    def contains(self, lo: float, hi: float) -> bool:
        tol = _SNAP * self.dx
        return lo >= self.x_min - tol and hi <= self.x_max + tol

    def boundary_mass(self, density: np.ndarray) -> float:
        """Mass of a position density within the edge bands of the grid."""
        band = max(1, int(self.n_points * BOUNDARY_BAND))
        return float((density[:band].sum() + density[-band:].sum()) * self.dx)


@dataclass(frozen=True, eq=False)
class PureState:
    grid: PositionGrid
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.grid.n_points,):
            raise PreconditionError("amplitude vector does not match the grid")
        object.__setattr__(self, "amplitudes", _frozen(amps))

    @classmethod
    def normalized(cls, grid: PositionGrid, amplitudes) -> "PureState":
        amps = np.asarray(amplitudes, dtype=complex)
        norm = math.sqrt(float(np.sum(np.abs(amps) ** 2)) * grid.dx)
        if norm < 1e-150:
            raise ZeroWeightOutcome("cannot normalize a vanishing state")
        return cls(grid, amps / norm)

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def norm(self) -> float:
        return float(self.density.sum() * self.grid.dx)

    def to_density_matrix(self) -> "DensityMatrix":
        psi = self.amplitudes
        return DensityMatrix(self.grid, np.outer(psi, psi.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Kernel ``rho(x_k, x_l)`` with trace ``sum(diag) * dx``."""

    grid: PositionGrid
    elements: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.elements, dtype=complex)
        n = self.grid.n_points
        if rho.shape != (n, n):
            raise PreconditionError("density matrix does not match the grid")
        if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_TOL * max(1.0, np.max(np.abs(rho))):
            raise PreconditionError("density matrix is not Hermitian")
        object.__setattr__(self, "elements", _frozen(rho))

    @classmethod
    def mixture(cls, states: Sequence[PureState], weights: Sequence[float]) -> "DensityMatrix":
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=NORM_TOL):
            raise PreconditionError("mixture weights must be non-negative and sum to 1")
        grid = states[0].grid
        rho = sum(w * np.outer(s.amplitudes, s.amplitudes.conj()) for s, w in zip(states, weights))
        return cls(grid, rho)

    @property
    def density(self) -> np.ndarray:
        return np.real(np.diag(self.elements))

    @property
    def trace(self) -> float:
        return float(self.density.sum() * self.grid.dx)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.elements * self.grid.dx)[0])

    def is_valid(self, psd_tol: float = 1e-10) -> bool:
        return abs(self.trace - 1.0) <= NORM_TOL and self.min_eigenvalue() >= -psd_tol


State = Union[PureState, DensityMatrix]


class OperatorKind(str, enum.Enum):
    SHARP = "sharp"
    SMEARED = "smeared"


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Position-diagonal measurement operator with entries in [0, 1].

    ``center`` and ``resolution`` are ``None`` for operators built from an
    arbitrary union of intervals.
    """

    grid: PositionGrid
    kind: OperatorKind
    center: float | None
    resolution: float | None
    diagonal: np.ndarray = field(repr=False)

    def __post_init__(self):
        diag = np.asarray(self.diagonal, dtype=float)
        object.__setattr__(self, "kind", OperatorKind(self.kind))
        if diag.shape != (self.grid.n_points,):
            raise PreconditionError("operator diagonal does not match the grid")
        if np.any(diag < 0) or np.any(diag > 1):
            raise PreconditionError("operator entries must lie in [0, 1]")
        if self.kind is OperatorKind.SHARP and np.any((diag != 0) & (diag != 1)):
            raise PreconditionError("sharp operator entries must be 0 or 1")
        object.__setattr__(self, "diagonal", _frozen(diag))

    @classmethod
    def from_intervals(cls, grid: PositionGrid, intervals) -> "MeasurementOperator":
        for lo, hi in intervals:
            if not grid.contains(lo, hi):
                raise OutOfRange(f"interval [{lo}, {hi}) leaves the grid")
        return cls(grid, OperatorKind.SHARP, None, None, grid.indicator(intervals))

    @property
    def weight_is_quadratic(self) -> bool:
        return self.kind is OperatorKind.SMEARED


def make_gaussian_state(
    grid: PositionGrid, sigma: float, p: float, center: float = 0.0
) -> PureState:
    """Gaussian packet ``exp(-(x-c)^2/(2 sigma^2) + i p x)``, normalized on the grid."""
    dx = grid.dx
    if sigma < 4 * dx:
        raise GridTooCoarse(f"sigma={sigma} is below 4*dx={4 * dx}")
    if abs(p) * dx > math.pi / 4:
        raise GridTooCoarse(f"|p|*dx={abs(p) * dx:.4g} exceeds pi/4")
    # |psi|^2 is normal with standard deviation sigma/sqrt(2)
    tail = 0.5 * (erfc((grid.x_max - center) / sigma) + erfc((center - grid.x_min) / sigma))
    if tail >= 1e-8:
        raise SupportOverflow(f"packet tail mass {tail:.3g} outside the grid (limit 1e-8)")
    x = grid.x
    return PureState.normalized(grid, np.exp(-((x - center) ** 2) / (2 * sigma**2) + 1j * p * x))


def propagate(values: np.ndarray, grid: PositionGrid, mass: float, t: float, axis: int = -1) -> np.ndarray:
    """Apply ``exp(-i k^2 t / 2m)`` along ``axis`` (spectral, periodic)."""
    if t == 0:
        return np.array(values, dtype=complex)
    phase = np.exp(-0.5j * grid.wavenumbers**2 * t / mass)
    shape = [1] * np.ndim(values)
    shape[axis] = grid.n_points
    return np.fft.ifft(np.fft.fft(values, axis=axis) * phase.reshape(shape), axis=axis)


def evolve(state: State, mass: float, t: float, boundary_tol: float | None = 1e-6) -> State:
    """Free evolution by ``t`` (negative ``t`` runs the adjoint).

    Raises SupportOverflow when more than ``boundary_tol`` of the norm sits in
    the edge bands afterwards; pass ``None`` to skip the check.
    """
    if mass <= 0:
        raise PreconditionError("mass must be positive")
    grid = state.grid
    if isinstance(state, PureState):
        out = PureState(grid, propagate(state.amplitudes, grid, mass, t))
        norm = state.norm
    else:
        left = propagate(state.elements, grid, mass, t, axis=0)
        rho = propagate(left.conj().T, grid, mass, t, axis=0).conj().T
        out = DensityMatrix(grid, 0.5 * (rho + rho.conj().T))
        norm = state.trace
    if boundary_tol is not None:
        leak = grid.boundary_mass(out.density)
        if leak > boundary_tol * max(norm, UNDERFLOW):
            raise SupportOverflow(
                f"boundary mass {leak:.3g} after t={t} exceeds {boundary_tol:g} of the norm"
            )
    return out


def make_measurement_operator(
    grid: PositionGrid, kind: OperatorKind | str, x0: float, delta: float
) -> MeasurementOperator:
    """Resolution-``delta`` position operator centred at ``x0``.

    Sharp operators select the half-open cell ``[x0 - delta/2, x0 + delta/2)`` so
    that adjacent cells are exactly disjoint. Smeared ones have diagonal
    ``exp(-(x - x0)^2 / (2 delta^2))``.
    """
    kind = OperatorKind(kind)
    if delta < 2 * grid.dx * (1 - _SNAP):
        raise ResolutionBelowGrid(f"delta={delta} is below 2*dx={2 * grid.dx}")
    lo, hi = x0 - delta / 2, x0 + delta / 2
    if not grid.contains(lo, hi):
        raise OutOfRange(f"cell [{lo}, {hi}) leaves the grid [{grid.x_min}, {grid.x_max})")
    if kind is OperatorKind.SHARP:
        diag = grid.indicator([(lo, hi)])
    else:
        diag = np.exp(-((grid.x - x0) ** 2) / (2 * delta**2))
    return MeasurementOperator(grid, kind, x0, delta, diag)


def outcome_weight(state: State, op: MeasurementOperator) -> float:
    """``Tr(rho M)`` for sharp operators, ``Tr(M rho M)`` for smeared ones."""
    m = op.diagonal**2 if op.weight_is_quadratic else op.diagonal
    return float(np.dot(m, state.density) * state.grid.dx)


def collapse(state: State, op: MeasurementOperator) -> tuple[State, float]:
    """Conditioned state ``M rho M / w`` together with the outcome weight ``w``."""
    weight = outcome_weight(state, op)
    if weight <= UNDERFLOW:
        raise ZeroWeightOutcome(f"outcome weight {weight:.3g} is numerically zero")
    m = op.diagonal
    if isinstance(state, PureState):
        return PureState(state.grid, m * state.amplitudes / math.sqrt(weight)), weight
    rho = m[:, None] * state.elements * m[None, :] / weight
    return DensityMatrix(state.grid, rho), weight


def ensemble(state: State, cutoff: float = 1e-15) -> tuple[np.ndarray, np.ndarray]:
    """Weights and grid-normalized vectors with ``rho = sum_k w_k |v_k><v_k|``."""
    if isinstance(state, PureState):
        return np.ones(1), state.amplitudes[None, :]
    dx = state.grid.dx
    w, vecs = np.linalg.eigh(state.elements * dx)
    keep = w > cutoff * max(w[-1], 0.0)
    return w[keep], vecs[:, keep].T / math.sqrt(dx)
