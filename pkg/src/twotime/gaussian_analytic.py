"""Closed forms for a free Gaussian packet probed by Gaussian-smeared cells.

The formulas are evaluated exactly as printed. They are approximations valid
for ``delta << |x| << sigma``; the numeric engine in :mod:`twotime.two_time`
is treated as ground truth and the helpers at the bottom of this module
quantify how far the closed forms sit from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .state_space import OperatorKind, PositionGrid, make_gaussian_state
from .two_time import (
    SamplePartition,
    SampleSet,
    TwoTimeSpec,
    point_interference,
    point_probabilities,
    resolution_comparison,
)

VALID_RATIO = 0.1


@dataclass(frozen=True)
class GaussianExample:
    """Packet width ``sigma``, mean momentum ``p``, mass ``m``, cell size ``delta``, flight time ``t``."""

    sigma: float
    p: float
    m: float
    delta: float
    t: float

    def __post_init__(self):
        if self.t <= 0 or self.m <= 0 or self.delta <= 0 or self.sigma <= 0:
            raise PreconditionError("sigma, m, delta and t must all be positive")

    @property
    def delta_ratio(self) -> float:
        return self.delta / self.sigma

    @property
    def valid(self) -> bool:
        return self.delta_ratio <= VALID_RATIO

    def in_regime(self, x0: float) -> bool:
        """``delta << |x0| << sigma``, read as a factor of ten on each side."""
        return 10 * self.delta <= abs(x0) <= self.sigma / 10

    @property
    def drift(self) -> float:
        return self.p * self.t / self.m


@dataclass(frozen=True)
class DerivedParams:
    r: float
    a: float
    b: float
    c: float


def derived_params(example: GaussianExample) -> DerivedParams:
    return params_from_r(example.m * example.delta**2 / example.t)


def params_from_r(r: float) -> DerivedParams:
    a = 1 + 2 * r / (1 + r) ** 2
    b = 2 * r * (1 - r) ** 2 / (1 + r**2)
    c = r * (1 + 2 * r - 3 * r**2 + 2 * r**3) / (2 * (1 + r**2) ** 2)
    return DerivedParams(r, a, b, c)


def closed_form_point_probability(example: GaussianExample, x, x_prime):
    """Closed-form ``p_delta(x, 0; x', t)``."""
    prm = derived_params(example)
    d = example.delta
    offset = np.asarray(x_prime) - np.asarray(x) - example.drift
    pref = math.pi * (d / example.sigma) * prm.r / (1 + prm.r)
    return pref * np.exp(-prm.a / (4 * d**2) * offset**2)


def closed_form_interference(example: GaussianExample, x, x_prime):
    """Closed-form ``d_delta(x + delta/2, x - delta/2, 0; x', t)``."""
    prm = derived_params(example)
    d = example.delta
    offset = np.asarray(x_prime) - np.asarray(x) - example.drift
    phase = example.p * d + prm.b / d * offset
    return closed_form_point_probability(example, x, x_prime) * math.exp(-prm.c) * np.exp(1j * phase)


@dataclass(frozen=True)
class CoarseSetSpec:
    """Two sets of common size ``L`` centred at ``x1`` (time 0) and ``x2`` (time t)."""

    x1: float
    x2: float
    size: float

    def offset(self, example: GaussianExample) -> float:
        return self.x2 - self.x1 - example.drift

    def large_vs_delta(self, example: GaussianExample) -> bool:
        return self.size / example.delta >= 10

    def small_vs_sigma(self, example: GaussianExample, limit: float = 0.3) -> bool:
        return self.size / example.sigma <= limit


@dataclass(frozen=True)
class CoarseEstimate:
    p: float
    epsilon: float
    k: float
    k_prime: float

    @property
    def ratio(self) -> float:
        return self.epsilon / self.p if self.p else math.nan


def coarse_set_estimates(
    example: GaussianExample, coarse: CoarseSetSpec, k: float = 1.0, k_prime: float = 1.0
) -> CoarseEstimate:
    """Order-of-magnitude forms for coarse sets, scaled by the constants ``k`` and ``k'``."""
    prm = derived_params(example)
    delta_off = coarse.offset(example)
    base = (coarse.size / example.sigma) * math.exp(-(delta_off**2) / (4 * coarse.size**2))
    phase = example.p * example.delta + prm.b * delta_off / example.delta
    return CoarseEstimate(k * base, k_prime * base * math.cos(phase), k, k_prime)


def calibrate_constants(example: GaussianExample, size: float, p_at_zero: float, eps_at_zero: float):
    """``(k, k')`` matching the coarse forms to numeric values at zero offset."""
    base = size / example.sigma
    cosine = math.cos(example.p * example.delta)
    k = p_at_zero / base
    k_prime = eps_at_zero / (base * cosine) if abs(cosine) > 1e-12 else math.nan
    return k, k_prime


# numeric cross-checks


def example_grid(example: GaussianExample, points_per_delta: int = 4, half_width: float | None = None) -> PositionGrid:
    """Grid resolving ``delta`` and holding the packet plus its drift."""
    if half_width is None:
        half_width = 6 * example.sigma + abs(example.drift)
    dx_max = example.delta / points_per_delta
    n = 8
    while 2 * half_width / n > dx_max:
        n *= 2
    # shrink the box so that dx divides delta exactly
    dx = example.delta / points_per_delta
    half = n * dx / 2
    return PositionGrid(-half, half, n)


def _state(example: GaussianExample, grid: PositionGrid):
    return make_gaussian_state(grid, example.sigma, example.p)


@dataclass(frozen=True)
class PointScan:
    offsets: np.ndarray
    numeric_p: np.ndarray
    numeric_d: np.ndarray
    closed_p: np.ndarray
    closed_d: np.ndarray


def point_scan(example: GaussianExample, x: float, offsets, kind=OperatorKind.SMEARED,
               grid: PositionGrid | None = None) -> PointScan:
    """Numeric and closed-form point quantities at ``x' = x + p t/m + offset``."""
    grid = grid or example_grid(example)
    state = _state(example, grid)
    offsets = np.asarray(offsets, dtype=float)
    x2 = x + example.drift + offsets
    p_num = point_probabilities(state, example.m, 0.0, example.t, x, x2, example.delta, kind)
    d_num = point_interference(state, example.m, 0.0, example.t, x, x2, example.delta, kind)
    return PointScan(offsets, p_num, d_num,
                     closed_form_point_probability(example, x, x2),
                     closed_form_interference(example, x, x2))


def fit_gaussian_exponent(offsets, values) -> float:
    """Least-squares slope of ``log(values)`` against ``offsets**2``."""
    offsets = np.asarray(offsets, dtype=float)
    slope, _ = np.polyfit(offsets**2, np.log(np.asarray(values, dtype=float)), 1)
    return float(slope)


@dataclass(frozen=True)
class PointComparison:
    example: GaussianExample
    params: DerivedParams
    fitted_exponent: float
    closed_exponent: float
    modulus_ratio: float
    closed_modulus_ratio: float
    prefactor_ratio: float
    phase_slope: float

    @property
    def exponent_deviation(self) -> float:
        return self.fitted_exponent / self.closed_exponent - 1

    @property
    def modulus_deviation(self) -> float:
        return self.modulus_ratio / self.closed_modulus_ratio - 1


def compare_point_forms(example: GaussianExample, x: float = 0.0, span: float = 2.0, n_offsets: int = 41,
                        kind=OperatorKind.SMEARED, grid: PositionGrid | None = None) -> PointComparison:
    """Fit the numeric point probability and interference against the closed forms.

    ``prefactor_ratio`` is numeric over closed-form probability at zero offset;
    ``phase_slope`` is ``delta * d(arg d)/d(offset)`` of the numeric interference,
    the counterpart of the closed-form ``b``.
    """
    d = example.delta
    offsets = np.linspace(-span * d, span * d, n_offsets)
    scan = point_scan(example, x, offsets, kind, grid)
    prm = derived_params(example)
    mid = n_offsets // 2
    phase = np.unwrap(np.angle(scan.numeric_d))
    return PointComparison(
        example=example,
        params=prm,
        fitted_exponent=fit_gaussian_exponent(offsets, scan.numeric_p),
        closed_exponent=-prm.a / (4 * d**2),
        modulus_ratio=float(abs(scan.numeric_d[mid]) / scan.numeric_p[mid]),
        closed_modulus_ratio=math.exp(-prm.c),
        prefactor_ratio=float(scan.numeric_p[mid] / scan.closed_p[mid]),
        phase_slope=float(np.polyfit(offsets, phase, 1)[0] * d),
    )


def coarse_spec(example: GaussianExample, grid: PositionGrid, coarse: CoarseSetSpec,
                kind=OperatorKind.SMEARED, state=None) -> TwoTimeSpec:
    """Two single-set partitions whose cell lattices start at each set's lower end."""
    half = coarse.size / 2
    first = SamplePartition.single(grid, SampleSet.interval(coarse.x1 - half, coarse.x1 + half),
                                   example.delta, origin=coarse.x1 - half)
    second = SamplePartition.single(grid, SampleSet.interval(coarse.x2 - half, coarse.x2 + half),
                                    example.delta, origin=coarse.x2 - half)
    state = state if state is not None else _state(example, grid)
    return TwoTimeSpec(state, example.m, 0.0, example.t, first, second, kind)


@dataclass(frozen=True)
class EpsilonScan:
    offsets: np.ndarray
    p_fine: np.ndarray
    p_coarse: np.ndarray
    epsilon: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.epsilon / self.p_fine


def epsilon_scan(example: GaussianExample, size: float, offsets, x1: float = 0.0,
                 kind=OperatorKind.SMEARED, grid: PositionGrid | None = None) -> EpsilonScan:
    """``p_delta``, ``p_2delta`` and their difference as the second set slides by ``offsets``."""
    grid = grid or example_grid(example)
    state = _state(example, grid)
    rows = []
    for off in offsets:
        coarse = CoarseSetSpec(x1, x1 + example.drift + off, size)
        cmp = resolution_comparison(coarse_spec(example, grid, coarse, kind, state), 0, 0)
        rows.append((cmp.p_fine, cmp.p_coarse, cmp.epsilon))
    arr = np.array(rows)
    return EpsilonScan(np.asarray(offsets, dtype=float), arr[:, 0], arr[:, 1], arr[:, 2])


def oscillation_period(offsets, values) -> float:
    """Period estimated from sign changes; ``inf`` when fewer than two are seen."""
    offsets = np.asarray(offsets, dtype=float)
    values = np.asarray(values, dtype=float)
    crossings = []
    for k in range(len(values) - 1):
        v0, v1 = values[k], values[k + 1]
        if v0 == 0 or v0 * v1 < 0:
            frac = 0.0 if v0 == 0 else v0 / (v0 - v1)
            crossings.append(offsets[k] + frac * (offsets[k + 1] - offsets[k]))
    if len(crossings) < 2:
        return math.inf
    return float(2 * np.mean(np.diff(crossings)))


def closed_form_period(example: GaussianExample) -> float:
    b = derived_params(example).b
    return 2 * math.pi * example.delta / abs(b) if abs(b) > 1e-9 else math.inf
