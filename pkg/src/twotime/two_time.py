"""Probability rules for position measurements at two successive times.

Two families of rules live here:

* the standard sequential rule, where a sample set enters through its own
  projector ``Tr(Q_j P_i rho(t1) P_i)``, together with the decoherence
  functional that measures its failure to be additive;
* the resolution-dependent (contextual) rule, where every sample set is
  resolved into device cells of size ``delta`` and probabilities are summed
  over cell pairs.

States are handled as weighted ensembles of vectors, so pure states and
density matrices share one code path.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import AlignmentError, InternalInconsistency, OutOfRange, PreconditionError
from .state_space import (
    OperatorKind,
    PositionGrid,
    State,
    ensemble,
    evolve,
    make_measurement_operator,
    propagate,
)

ALIGN_TOL = 1e-9
AGREEMENT_TOL = 1e-9
PROBABILITY_SLACK = 1e-10

Interval = tuple[float, float]
Index = Union[int, Sequence[int]]


@dataclass(frozen=True)
class SampleSet:
    """Union of disjoint half-open intervals ``[lo, hi)``."""

    intervals: tuple[Interval, ...]

    def __post_init__(self):
        ivs = tuple(sorted((float(lo), float(hi)) for lo, hi in self.intervals))
        for lo, hi in ivs:
            if not hi > lo:
                raise PreconditionError(f"empty interval [{lo}, {hi})")
        for (_, hi), (lo, _) in zip(ivs, ivs[1:]):
            if lo < hi:
                raise PreconditionError("intervals of a sample set overlap")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "SampleSet":
        return cls(((lo, hi),))

    @classmethod
    def whole_line(cls, grid: PositionGrid) -> "SampleSet":
        return cls(((grid.x_min, grid.x_max),))

    @property
    def length(self) -> float:
        return sum(hi - lo for lo, hi in self.intervals)

    @property
    def lower(self) -> float:
        return self.intervals[0][0]

    @property
    def upper(self) -> float:
        return self.intervals[-1][1]

    def union(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(self.intervals + other.intervals)

    def indicator(self, grid: PositionGrid) -> np.ndarray:
        return grid.indicator(self.intervals)

    def cells(self, delta: float, origin: float = 0.0) -> list[Interval]:
        """Split into cells of size ``delta`` on the lattice ``origin + k*delta``."""
        out = []
        for lo, hi in self.intervals:
            k_lo, k_hi = lattice_index(lo, delta, origin), lattice_index(hi, delta, origin)
            out.extend((origin + k * delta, origin + (k + 1) * delta) for k in range(k_lo, k_hi))
        return out

    def __str__(self) -> str:
        return "+".join(f"[{lo:.6g},{hi:.6g})" for lo, hi in self.intervals)


def lattice_index(x: float, delta: float, origin: float) -> int:
    q = (x - origin) / delta
    k = round(q)
    if abs(q - k) > ALIGN_TOL * max(1.0, abs(q)):
        raise AlignmentError(f"boundary {x} is not on the cell lattice {origin} + k*{delta}")
    return int(k)


@dataclass(frozen=True, eq=False)
class SamplePartition:
    """Disjoint sample sets, each resolved into cells of size ``delta``.

    Cell representative points are the cell midpoints. Cell boundaries sit on
    the lattice ``origin + k*delta``; sets whose ends are off that lattice are
    rejected.
    """

    grid: PositionGrid
    sets: tuple[SampleSet, ...]
    delta: float
    origin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if not self.sets:
            raise PreconditionError("a partition needs at least one sample set")
        if self.delta <= 0:
            raise PreconditionError("cell size must be positive")
        for s in self.sets:
            for lo, hi in s.intervals:
                if not self.grid.contains(lo, hi):
                    raise OutOfRange(f"sample set {s} leaves the grid")
        ivs = sorted(iv for s in self.sets for iv in s.intervals)
        for (_, hi), (lo, _) in zip(ivs, ivs[1:]):
            if lo < hi - ALIGN_TOL * self.delta:
                raise PreconditionError("sample sets of a partition overlap")
        self.cells  # alignment check

    @classmethod
    def from_boundaries(
        cls, grid: PositionGrid, boundaries: Sequence[float], delta: float, origin: float = 0.0
    ) -> "SamplePartition":
        b = list(boundaries)
        return cls(grid, tuple(SampleSet.interval(lo, hi) for lo, hi in zip(b, b[1:])), delta, origin)

    @classmethod
    def single(cls, grid: PositionGrid, sample_set: SampleSet, delta: float, origin: float = 0.0):
        return cls(grid, (sample_set,), delta, origin)

    @cached_property
    def cells(self) -> tuple[tuple[Interval, ...], ...]:
        return tuple(tuple(s.cells(self.delta, self.origin)) for s in self.sets)

    def centers(self, i: int) -> np.ndarray:
        return np.array([(lo + hi) / 2 for lo, hi in self.cells[i]])

    @property
    def complete(self) -> bool:
        cover = sum(s.indicator(self.grid) for s in self.sets)
        return bool(np.all(cover == 1))

    def merged(self, indices: Index) -> SampleSet:
        idx = _indices(indices)
        out = self.sets[idx[0]]
        for k in idx[1:]:
            out = out.union(self.sets[k])
        return out

    def with_delta(self, delta: float) -> "SamplePartition":
        return replace(self, delta=delta)


def _indices(i: Index) -> tuple[int, ...]:
    if isinstance(i, (int, np.integer)):
        return (int(i),)
    idx = tuple(int(k) for k in i)
    if len(set(idx)) != len(idx) or not idx:
        raise PreconditionError(f"set indices must be distinct and non-empty, got {i}")
    return idx


@dataclass(frozen=True, eq=False)
class TwoTimeSpec:
    """Initial state, dynamics and the sample partitions at ``t1 < t2``."""

    state: State
    mass: float
    t1: float
    t2: float
    first: SamplePartition
    second: SamplePartition
    kind: OperatorKind = OperatorKind.SHARP

    def __post_init__(self):
        object.__setattr__(self, "kind", OperatorKind(self.kind))
        if not (self.t2 > self.t1 >= 0):
            raise PreconditionError(f"need t2 > t1 >= 0, got t1={self.t1}, t2={self.t2}")
        if self.mass <= 0:
            raise PreconditionError("mass must be positive")
        grid = self.state.grid
        if self.first.grid != grid or self.second.grid != grid:
            raise PreconditionError("partitions and state live on different grids")

    @property
    def grid(self) -> PositionGrid:
        return self.state.grid

    @property
    def tau(self) -> float:
        return self.t2 - self.t1

    @cached_property
    def state_t1(self) -> State:
        return evolve(self.state, self.mass, self.t1)

    @cached_property
    def components(self) -> tuple[np.ndarray, np.ndarray]:
        return ensemble(self.state_t1)

    def branches(self, diagonal: np.ndarray) -> np.ndarray:
        """``U(tau) M v_k`` for every ensemble vector ``v_k`` at ``t1``."""
        _, vecs = self.components
        return propagate(diagonal[None, :] * vecs, self.grid, self.mass, self.tau)

    def intensity(self, diagonal: np.ndarray) -> np.ndarray:
        """Position density at ``t2`` of the unnormalized branch through ``M``."""
        w, _ = self.components
        return w @ (np.abs(self.branches(diagonal)) ** 2)

    def cross_density(self, diag_a: np.ndarray, diag_b: np.ndarray) -> np.ndarray:
        """``sum_k w_k conj(U M_b v_k) * (U M_a v_k)`` on the grid."""
        w, _ = self.components
        return w @ (np.conj(self.branches(diag_b)) * self.branches(diag_a))

    def cell_operators(self, partition: SamplePartition, i: int, resolution: float | None = None) -> np.ndarray:
        """Stacked diagonals of the cell operators of set ``i``.

        At twice the partition resolution, smeared cells are the sum of the two
        half-cell Gaussians, so that the coarse operator decomposes exactly.
        """
        delta = partition.delta
        res = delta if resolution is None else resolution
        cells = partition.sets[i].cells(res, partition.origin)
        grid = self.grid
        if self.kind is OperatorKind.SHARP:
            return np.array([grid.indicator([c]) for c in cells])
        ops = []
        for lo, hi in cells:
            halves = SampleSet.interval(lo, hi).cells(delta, partition.origin)
            ops.append(sum(make_measurement_operator(grid, self.kind, (a + b) / 2, delta).diagonal
                           for a, b in halves))
        return np.array(ops)

    def final_weight(self, indices: Index) -> np.ndarray:
        """Diagonal of ``sum_beta P_beta`` over the second-time cells of the sets."""
        return sum(self.cell_operators(self.second, j).sum(axis=0) for j in _indices(indices))

    @cached_property
    def cell_table(self) -> "CellTable":
        return cell_pair_table(self)


@dataclass(frozen=True, eq=False)
class CellTable:
    """Joint cell probabilities ``p_delta(x_alpha, t1; x_beta, t2)``.

    ``probabilities[alpha, beta]``; ``first_owner``/``second_owner`` map each
    cell to the index of the sample set containing it.
    """

    probabilities: np.ndarray
    first_centers: np.ndarray
    second_centers: np.ndarray
    first_owner: np.ndarray
    second_owner: np.ndarray
    first_weights: np.ndarray

    def total(self, first: Iterable[int], second: Iterable[int]) -> float:
        rows = np.isin(self.first_owner, list(first))
        cols = np.isin(self.second_owner, list(second))
        return math.fsum(self.probabilities[np.ix_(rows, cols)].ravel())


def cell_pair_table(spec: TwoTimeSpec) -> CellTable:
    """Every cell-pair probability of both partitions of a TwoTimeSpec."""
    grid = spec.grid
    first_ops, first_owner, second_ops, second_owner = [], [], [], []
    for i in range(len(spec.first.sets)):
        ops = spec.cell_operators(spec.first, i)
        first_ops.append(ops)
        first_owner += [i] * len(ops)
    for j in range(len(spec.second.sets)):
        ops = spec.cell_operators(spec.second, j)
        second_ops.append(ops)
        second_owner += [j] * len(ops)
    first_ops, second_ops = np.concatenate(first_ops), np.concatenate(second_ops)
    rho_diag = spec.state_t1.density
    sq = first_ops**2 if spec.kind is OperatorKind.SMEARED else first_ops
    table = np.empty((len(first_ops), len(second_ops)))
    for a, diag in enumerate(first_ops):
        table[a] = second_ops @ spec.intensity(diag) * grid.dx
    return CellTable(
        probabilities=table,
        first_centers=np.concatenate([spec.first.centers(i) for i in range(len(spec.first.sets))]),
        second_centers=np.concatenate([spec.second.centers(j) for j in range(len(spec.second.sets))]),
        first_owner=np.array(first_owner),
        second_owner=np.array(second_owner),
        first_weights=sq @ rho_diag * grid.dx,
    )


def single_time_probability(state: State, sample_set: SampleSet) -> float:
    """``Tr(P_U rho)`` clamped to [0, 1]."""
    value = float(np.dot(sample_set.indicator(state.grid), state.density) * state.grid.dx)
    if not -PROBABILITY_SLACK <= value <= 1 + PROBABILITY_SLACK:
        raise InternalInconsistency(f"single-time probability {value} outside [0, 1]")
    return min(max(value, 0.0), 1.0)


def _standard(spec: TwoTimeSpec, first: SampleSet, second: SampleSet) -> float:
    grid = spec.grid
    density = spec.intensity(first.indicator(grid))
    return float(np.dot(second.indicator(grid), density) * grid.dx)


def standard_two_time(spec: TwoTimeSpec, i: Index, j: Index) -> float:
    """Sequential rule ``Tr(Q_j P_i rho(t1) P_i)`` with one projector per set.

    A tuple of indices stands for the union of those sets, entering through
    the sum of their projectors.
    """
    value = _standard(spec, spec.first.merged(i), spec.second.merged(j))
    if value < -PROBABILITY_SLACK:
        raise InternalInconsistency(f"negative probability {value}")
    return max(value, 0.0)


def decoherence_functional(spec: TwoTimeSpec, a: int, b: int, j: Index) -> complex:
    """``d = Tr(Q_j P_a rho(t1) P_b)``."""
    if a == b:
        raise PreconditionError("the decoherence functional needs two distinct sets")
    grid = spec.grid
    cross = spec.cross_density(spec.first.sets[a].indicator(grid), spec.first.sets[b].indicator(grid))
    return complex(np.dot(spec.second.merged(j).indicator(grid), cross) * grid.dx)


def additivity_defect(spec: TwoTimeSpec, a: int, b: int, j: Index) -> float:
    """Excess of the merged-set probability over the sum of its parts.

    Evaluated directly from merged projectors and through ``2 Re d``; the two
    must agree to ``1e-9``.
    """
    if a == b:
        raise PreconditionError("the additivity defect needs two distinct sets")
    direct = (_standard(spec, spec.first.merged((a, b)), spec.second.merged(j))
              - _standard(spec, spec.first.sets[a], spec.second.merged(j))
              - _standard(spec, spec.first.sets[b], spec.second.merged(j)))
    expansion = 2 * decoherence_functional(spec, a, b, j).real
    if abs(direct - expansion) > AGREEMENT_TOL:
        raise InternalInconsistency(f"defect {direct!r} differs from 2 Re d = {expansion!r}")
    return expansion


def contextual_two_time(spec: TwoTimeSpec, i: Index, j: Index) -> float:
    """Cell-resolved probability ``sum_alpha sum_beta p_delta(x_alpha; x_beta)``.

    Uses compensated summation, so the result is additive over disjoint unions
    up to a final rounding.
    """
    value = spec.cell_table.total(_indices(i), _indices(j))
    if spec.kind is OperatorKind.SHARP and value > 1 + PROBABILITY_SLACK:
        raise InternalInconsistency(f"contextual probability {value} exceeds 1")
    return value


def overcompleteness(spec: TwoTimeSpec) -> float:
    """Total contextual probability over all set pairs (1 for complete sharp tilings)."""
    table = spec.cell_table
    return math.fsum(table.probabilities.ravel())


@dataclass(frozen=True)
class ResolutionComparison:
    p_fine: float
    p_coarse: float
    epsilon: float
    interference_sum: float
    delta: float


def resolution_comparison(spec: TwoTimeSpec, i: int, j: Index, delta: float | None = None) -> ResolutionComparison:
    """Contextual probabilities at resolutions ``delta`` and ``2*delta``.

    ``interference_sum`` is ``-2 Re sum d_delta`` over the half-cell pairs of
    every coarse cell; it must reproduce ``p_fine - p_coarse`` to ``1e-9``.
    """
    if delta is not None and delta != spec.first.delta:
        spec = replace(spec, first=spec.first.with_delta(delta), second=spec.second.with_delta(delta))
    delta = spec.first.delta
    grid = spec.grid
    for part, idx in ((spec.first, (i,)), (spec.second, _indices(j))):
        for k in idx:
            part.sets[k].cells(2 * delta, part.origin)
    final = spec.final_weight(j)
    fine = spec.cell_operators(spec.first, i)
    coarse = spec.cell_operators(spec.first, i, resolution=2 * delta)
    p_fine = math.fsum(float(np.dot(final, spec.intensity(op))) * grid.dx for op in fine)
    p_coarse = math.fsum(float(np.dot(final, spec.intensity(op))) * grid.dx for op in coarse)
    # cell 2k is the lower half of coarse cell k, cell 2k+1 the upper half
    terms = []
    for lower, upper in zip(fine[0::2], fine[1::2]):
        d = np.dot(final, spec.cross_density(upper, lower)) * grid.dx
        terms.append(-2 * d.real)
    interference = math.fsum(terms)
    eps = p_fine - p_coarse
    if abs(eps - interference) > AGREEMENT_TOL:
        raise InternalInconsistency(f"epsilon {eps!r} differs from interference sum {interference!r}")
    return ResolutionComparison(p_fine, p_coarse, eps, interference, delta)


def resolution_difference(spec: TwoTimeSpec, i: int, j: Index, delta: float | None = None) -> float:
    """``p_delta - p_2delta`` for the sets ``U_i`` at ``t1`` and ``U_j`` at ``t2``."""
    return resolution_comparison(spec, i, j, delta).epsilon


@dataclass(frozen=True)
class DecoherenceReport:
    pair: tuple[int, int]
    target: int
    d: complex
    p_a: float
    p_b: float
    tolerance: float
    floor: float = 1e-12

    @property
    def defect(self) -> float:
        return 2 * self.d.real

    @property
    def scale(self) -> float:
        return max(self.p_a, self.p_b, self.floor)

    @property
    def relative(self) -> float:
        return abs(self.d.real) / self.scale

    @property
    def consistent(self) -> bool:
        return abs(self.d.real) <= self.tolerance * self.scale


def consistency_scan(spec: TwoTimeSpec, tolerance: float = 1e-3, floor: float = 1e-12) -> list[DecoherenceReport]:
    """Decoherence reports for every first-time pair and every second-time set."""
    grid = spec.grid
    n1, n2 = len(spec.first.sets), len(spec.second.sets)
    branches = [spec.branches(s.indicator(grid)) for s in spec.first.sets]
    finals = [s.indicator(grid) for s in spec.second.sets]
    w, _ = spec.components
    densities = [w @ np.abs(br) ** 2 for br in branches]
    reports = []
    for j in range(n2):
        probs = [float(np.dot(finals[j], dens)) * grid.dx for dens in densities]
        for a, b in itertools.combinations(range(n1), 2):
            cross = w @ (np.conj(branches[b]) * branches[a])
            d = complex(np.dot(finals[j], cross) * grid.dx)
            reports.append(DecoherenceReport((a, b), j, d, probs[a], probs[b], tolerance, floor))
    return reports


def partition_consistent(reports: Sequence[DecoherenceReport]) -> bool:
    return all(r.consistent for r in reports)


def boundary_ambiguity_bound(size: float, delta: float) -> float:
    """Order of the cell-boundary ambiguity ``exp(-L^2/delta^2)`` for sets of size ``L``."""
    return math.exp(-(size / delta) ** 2)


def _point_branches(state: State, mass: float, t1: float, t2: float, centers, delta: float, kind):
    state_t1 = evolve(state, mass, t1)
    w, vecs = ensemble(state_t1)
    grid = state.grid
    out = []
    for c in centers:
        op = make_measurement_operator(grid, kind, c, delta)
        out.append(propagate(op.diagonal[None, :] * vecs, grid, mass, t2 - t1))
    return w, out


def _final_diagonals(grid: PositionGrid, x2s, delta: float, kind) -> np.ndarray:
    return np.array([make_measurement_operator(grid, kind, x2, delta).diagonal for x2 in np.atleast_1d(x2s)])


def point_probabilities(state: State, mass: float, t1: float, t2: float, x1: float, x2s,
                        delta: float, kind: OperatorKind | str = OperatorKind.SHARP) -> np.ndarray:
    """``p_delta(x1, t1; x2, t2)`` for each ``x2`` in ``x2s``."""
    if not t2 > t1 >= 0:
        raise PreconditionError("need t2 > t1 >= 0")
    w, (br,) = _point_branches(state, mass, t1, t2, [x1], delta, kind)
    dens = w @ np.abs(br) ** 2
    return _final_diagonals(state.grid, x2s, delta, kind) @ dens * state.grid.dx


def point_interference(state: State, mass: float, t1: float, t2: float, x1: float, x2s,
                       delta: float, kind: OperatorKind | str = OperatorKind.SHARP) -> np.ndarray:
    """``d_delta(x1 + delta/2, x1 - delta/2, t1; x2, t2)`` for each ``x2``."""
    if not t2 > t1 >= 0:
        raise PreconditionError("need t2 > t1 >= 0")
    w, (upper, lower) = _point_branches(state, mass, t1, t2, [x1 + delta / 2, x1 - delta / 2], delta, kind)
    cross = w @ (np.conj(lower) * upper)
    return _final_diagonals(state.grid, x2s, delta, kind) @ cross * state.grid.dx


__all__ = [
    "CellTable",
    "DecoherenceReport",
    "ResolutionComparison",
    "SamplePartition",
    "SampleSet",
    "TwoTimeSpec",
    "additivity_defect",
    "boundary_ambiguity_bound",
    "cell_pair_table",
    "consistency_scan",
    "contextual_two_time",
    "decoherence_functional",
    "overcompleteness",
    "partition_consistent",
    "point_interference",
    "point_probabilities",
    "resolution_comparison",
    "resolution_difference",
    "single_time_probability",
    "standard_two_time",
]
