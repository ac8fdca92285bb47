"""Repeated two-time experiments and the statistics of their outcomes.

Trials draw a first outcome from the device's cell probabilities at ``t1``,
collapse onto it, propagate to ``t2`` and draw the second outcome from the
conditioned state. The conditioned states depend only on the first cell, so
the conditional laws are tabulated once per device pair.

Random numbers come from counter-based Philox streams keyed by
``(seed, stream)``; trial ``i`` always reads the same two uniforms, whatever
the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Sequence, Union

import numpy as np
from scipy import stats

from .errors import (
    AlignmentError,
    InsufficientData,
    InternalInconsistency,
    PartitionMismatch,
    PreconditionError,
    ZeroWeightOutcome,
)
from .state_space import UNDERFLOW, OperatorKind, PositionGrid
from .two_time import (
    SampleSet,
    TwoTimeSpec,
    lattice_index,
    contextual_two_time,
    standard_two_time,
)

BLOCK = 4096
BLOCKED = -1


@dataclass(frozen=True)
class FullRecorder:
    """Records every position with resolution ``delta``; cells tile the grid."""

    delta: float
    origin: float = 0.0

    def cells(self, grid: PositionGrid) -> list[tuple[float, float]]:
        if self.delta < 2 * grid.dx * (1 - 1e-9):
            raise PreconditionError(f"device resolution {self.delta} is below 2*dx")
        try:
            k_lo = lattice_index(grid.x_min, self.delta, self.origin)
            k_hi = lattice_index(grid.x_max, self.delta, self.origin)
        except AlignmentError as exc:
            raise AlignmentError(f"device cells do not tile the grid: {exc}") from None
        return [(self.origin + k * self.delta, self.origin + (k + 1) * self.delta) for k in range(k_lo, k_hi)]

    @property
    def blocks(self) -> bool:
        return False


@dataclass(frozen=True)
class SlitFilter:
    """Passes the particle when it is found in ``slit``, blocks it otherwise."""

    slit: SampleSet

    def cells(self, grid: PositionGrid) -> list[tuple[float, float]]:
        return [(self.slit.lower, self.slit.upper)]

    @property
    def blocks(self) -> bool:
        return True


DeviceModel = Union[FullRecorder, SlitFilter]


def _device_operators(device: DeviceModel, grid: PositionGrid) -> np.ndarray:
    if isinstance(device, SlitFilter):
        return device.slit.indicator(grid)[None, :]
    return np.array([grid.indicator([c]) for c in device.cells(grid)])


def _device_centers(device: DeviceModel, grid: PositionGrid) -> np.ndarray:
    return np.array([(lo + hi) / 2 for lo, hi in device.cells(grid)])


@dataclass(frozen=True)
class TrialRecord:
    index: int
    first: int
    second: int
    x1: float
    x2: float


@dataclass(frozen=True)
class Blocked:
    index: int
    stage: int


def trial_uniforms(seed: int, start: int, stop: int, stream: int = 0) -> np.ndarray:
    """Uniforms of shape ``(stop - start, 2)`` for trials ``start..stop-1``."""
    if stop <= start:
        return np.empty((0, 2))
    out = []
    for b in range(start // BLOCK, (stop - 1) // BLOCK + 1):
        gen = np.random.Generator(np.random.Philox(key=[seed, stream], counter=[0, 0, b, 0]))
        block = gen.random((BLOCK, 2))
        lo = max(start - b * BLOCK, 0)
        hi = min(stop - b * BLOCK, BLOCK)
        out.append(block[lo:hi])
    return np.concatenate(out)


@dataclass(frozen=True, eq=False)
class TrialLog:
    """Outcomes of consecutive trials; cell ``-1`` marks a blocked particle."""

    device1: DeviceModel
    device2: DeviceModel
    grid: PositionGrid
    first: np.ndarray
    second: np.ndarray
    start: int = 0

    def __len__(self) -> int:
        return len(self.first)

    @cached_property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return _device_centers(self.device1, self.grid), _device_centers(self.device2, self.grid)

    def __iter__(self) -> Iterator[Union[TrialRecord, Blocked]]:
        c1, c2 = self.centers
        for k, (a, b) in enumerate(zip(self.first.tolist(), self.second.tolist())):
            idx = self.start + k
            if a == BLOCKED:
                yield Blocked(idx, 1)
            elif b == BLOCKED:
                yield Blocked(idx, 2)
            else:
                yield TrialRecord(idx, a, b, float(c1[a]), float(c2[b]))

    def head(self, n: int) -> "TrialLog":
        return TrialLog(self.device1, self.device2, self.grid, self.first[:n], self.second[:n], self.start)


class Sampler:
    """Tabulated two-time outcome law for one device pair."""

    def __init__(self, spec: TwoTimeSpec, device1: DeviceModel, device2: DeviceModel):
        self.spec = spec
        self.device1 = device1
        self.device2 = device2
        grid = spec.grid
        ops1 = _device_operators(device1, grid)
        ops2 = _device_operators(device2, grid)
        weights = ops1 @ spec.state_t1.density * grid.dx
        self.first_weights = weights
        self.first_cdf = self._cdf(weights, device1.blocks)
        self.second_cdf = np.full((len(ops1), len(ops2) + 1), np.nan)
        self.joint = np.zeros((len(ops1), len(ops2)))
        for a, w in enumerate(weights):
            if w <= UNDERFLOW:
                continue
            joint = ops2 @ spec.intensity(ops1[a]) * grid.dx
            self.joint[a] = joint
            self.second_cdf[a] = self._cdf(joint / w, device2.blocks)

    @staticmethod
    def _cdf(probs: np.ndarray, blocks: bool) -> np.ndarray:
        probs = np.clip(probs, 0.0, None)
        if blocks:
            rest = max(1.0 - probs.sum(), 0.0)
            cdf = np.cumsum(np.append(probs, rest))
        else:
            cdf = np.cumsum(np.append(probs, 0.0))
        if not cdf[-1] > 0:
            # numerically unreachable first cell; drawing it is a fault
            return np.full_like(cdf, np.nan)
        return cdf / cdf[-1]

    def _draw(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n1 = len(self.first_weights)
        first = np.searchsorted(self.first_cdf, u[:, 0], side="right")
        first = np.minimum(first, n1)
        second = np.full(len(u), BLOCKED)
        for a in np.unique(first):
            if a == n1:
                continue
            if self.first_weights[a] <= UNDERFLOW or np.isnan(self.second_cdf[a, -1]):
                raise ZeroWeightOutcome(f"drew cell {a} of zero weight")
            mask = first == a
            cdf = self.second_cdf[a]
            second[mask] = np.minimum(np.searchsorted(cdf, u[mask, 1], side="right"), len(cdf) - 1)
        n2 = self.second_cdf.shape[1] - 1
        first = np.where(first == n1, BLOCKED, first)
        second = np.where(second == n2, BLOCKED, second)
        return first, second

    def run(self, seed: int, n_trials: int, workers: int = 1, stream: int = 0, start: int = 0) -> TrialLog:
        """Trials ``start..start+n_trials-1``; output is identical for any ``workers``."""
        bounds = list(range(start, start + n_trials, BLOCK)) + [start + n_trials]
        chunks = list(zip(bounds, bounds[1:]))

        def work(chunk):
            return self._draw(trial_uniforms(seed, chunk[0], chunk[1], stream))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(c) for c in chunks]
        if parts:
            first = np.concatenate([p[0] for p in parts])
            second = np.concatenate([p[1] for p in parts])
        else:
            first = second = np.empty(0, dtype=int)
        return TrialLog(self.device1, self.device2, self.spec.grid, first, second, start)

    def sample(self, seed: int, index: int, stream: int = 0) -> Union[TrialRecord, Blocked]:
        return next(iter(self.run(seed, 1, stream=stream, start=index)))


def sample_trial(spec: TwoTimeSpec, device1: DeviceModel, device2: DeviceModel, seed: int, index: int,
                 stream: int = 0) -> Union[TrialRecord, Blocked]:
    """Outcome of trial ``index`` under master ``seed``."""
    return Sampler(spec, device1, device2).sample(seed, index, stream)


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    """Counts ``n(U_i x U_j, N)``; the extra last row and column collect
    outcomes outside every listed set (including blocked particles)."""

    first_sets: tuple[SampleSet, ...]
    second_sets: tuple[SampleSet, ...]
    counts: np.ndarray
    resolution: float | None = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def n(self, first: Sequence[int] | None = None, second: Sequence[int] | None = None) -> int:
        """Count over a union of sets at each time; ``None`` means every outcome."""
        rows = slice(None) if first is None else list(first)
        cols = slice(None) if second is None else list(second)
        return int(self.counts[rows][:, cols].sum())

    def frequency(self, i: int, j: int) -> float:
        return self.counts[i, j] / self.total if self.total else math.nan

    def check_axioms(self) -> None:
        if self.counts.dtype.kind not in "iu" or np.any(self.counts < 0):
            raise InternalInconsistency("counts must be non-negative integers")
        if self.n(None, None) != self.total or self.n([], None) != 0 or self.n(None, []) != 0:
            raise InternalInconsistency("count of the full or empty event is wrong")


def _cell_map(device: DeviceModel, grid: PositionGrid, sets: Sequence[SampleSet]) -> np.ndarray:
    """Index of the set holding each device cell, ``len(sets)`` for none."""
    ops = _device_operators(device, grid)
    out = np.full(len(ops), len(sets))
    for k, s in enumerate(sets):
        ind = s.indicator(grid)
        inside = ops @ ind
        size = ops.sum(axis=1)
        partial = (inside > 0) & (inside < size)
        if np.any(partial):
            raise PartitionMismatch(f"sample set {s} cuts through a device cell")
        hit = (inside > 0) & (inside == size)
        if np.any(out[hit] != len(sets)):
            raise PartitionMismatch("sample sets overlap")
        out[hit] = k
    return out


def _labels(log: TrialLog, first_sets, second_sets) -> tuple[np.ndarray, np.ndarray]:
    m1 = np.append(_cell_map(log.device1, log.grid, first_sets), len(first_sets))
    m2 = np.append(_cell_map(log.device2, log.grid, second_sets), len(second_sets))
    # BLOCKED (-1) indexes the trailing "outside" entry
    return m1[log.first], m2[log.second]


def _resolution(log: TrialLog) -> float | None:
    return log.device1.delta if isinstance(log.device1, FullRecorder) else None


def accumulate(records: Union[TrialLog, Iterable], first_sets: Sequence[SampleSet],
               second_sets: Sequence[SampleSet]) -> FrequencyTable:
    """Count trials in every ``U_i x U_j``."""
    first_sets, second_sets = tuple(first_sets), tuple(second_sets)
    n1, n2 = len(first_sets), len(second_sets)
    counts = np.zeros((n1 + 1, n2 + 1), dtype=np.int64)
    if isinstance(records, TrialLog):
        l1, l2 = _labels(records, first_sets, second_sets)
        np.add.at(counts, (l1, l2), 1)
        table = FrequencyTable(first_sets, second_sets, counts, _resolution(records))
    else:
        for rec in records:
            if isinstance(rec, Blocked):
                counts[n1, n2] += 1
                continue
            counts[_locate(rec.x1, first_sets), _locate(rec.x2, second_sets)] += 1
        table = FrequencyTable(first_sets, second_sets, counts)
    table.check_axioms()
    return table


def _locate(x: float, sets: Sequence[SampleSet]) -> int:
    hits = [k for k, s in enumerate(sets) if any(lo <= x < hi for lo, hi in s.intervals)]
    if len(hits) > 1:
        raise PartitionMismatch("sample sets overlap")
    return hits[0] if hits else len(sets)


def checkpoint_schedule(n_trials: int, lowest: int = 6) -> list[int]:
    """Powers of two from ``2**lowest`` up to ``n_trials``, plus ``n_trials`` itself."""
    out = [2**k for k in range(lowest, max(n_trials, 1).bit_length()) if 2**k <= n_trials]
    if not out or out[-1] != n_trials:
        out.append(n_trials)
    return out


def accumulate_checkpoints(log: TrialLog, first_sets, second_sets, checkpoints: Sequence[int]) -> list[FrequencyTable]:
    """Tables for the first ``N`` trials at every checkpoint, monotone in ``N``."""
    first_sets, second_sets = tuple(first_sets), tuple(second_sets)
    l1, l2 = _labels(log, first_sets, second_sets)
    shape = (len(first_sets) + 1, len(second_sets) + 1)
    flat = np.ravel_multi_index((l1, l2), shape)
    tables = []
    for n in checkpoints:
        counts = np.bincount(flat[:n], minlength=shape[0] * shape[1]).reshape(shape).astype(np.int64)
        table = FrequencyTable(first_sets, second_sets, counts, _resolution(log))
        table.check_axioms()
        if table.total != n:
            raise InternalInconsistency(f"table at N={n} holds {table.total} trials")
        if tables and np.any(table.counts < tables[-1].counts):
            raise InternalInconsistency("counts decreased between checkpoints")
        tables.append(table)
    return tables


def verify_frequency_axioms(log: TrialLog, first_sets, second_sets, checkpoints: Sequence[int]) -> None:
    """Assert monotonicity, normalization, the empty event and finite additivity exactly.

    Additivity is checked against a direct recount of every pairwise union.
    """
    tables = accumulate_checkpoints(log, first_sets, second_sets, checkpoints)
    first_sets, second_sets = tuple(first_sets), tuple(second_sets)
    full = tables[-1]
    for a in range(len(first_sets)):
        for b in range(a + 1, len(first_sets)):
            merged = accumulate(log, (first_sets[a].union(first_sets[b]),), second_sets)
            for j in range(len(second_sets) + 1):
                if merged.counts[0, j] != full.counts[a, j] + full.counts[b, j]:
                    raise InternalInconsistency(f"count of U{a} u U{b} is not additive")
    for a in range(len(second_sets)):
        for b in range(a + 1, len(second_sets)):
            merged = accumulate(log, first_sets, (second_sets[a].union(second_sets[b]),))
            if np.any(merged.counts[:, 0] != full.counts[:, a] + full.counts[:, b]):
                raise InternalInconsistency(f"count of V{a} u V{b} is not additive")


@dataclass(frozen=True)
class ConvergenceReport:
    label: str
    checkpoints: tuple[int, ...]
    frequencies: tuple[float, ...]
    oscillation: float
    half_width: float
    factor: float

    @property
    def verdict(self) -> str:
        return "converged" if self.oscillation <= self.factor * self.half_width else "inconclusive"


def convergence_report(checkpoints: Sequence[int], counts: Sequence[int], label: str = "",
                       tail_fraction: float = 1 / 8, confidence: float = 0.95,
                       factor: float = 4.0) -> ConvergenceReport:
    """Tail oscillation of ``f(N) = n(U, N)/N`` against the final binomial interval.

    The tail holds the checkpoints with ``N >= tail_fraction * N_final``; the
    half-width is that of the Wilson interval at ``N_final``.
    """
    checkpoints = [int(n) for n in checkpoints]
    counts = [int(c) for c in counts]
    if len(checkpoints) < 4:
        raise InsufficientData(f"need at least 4 checkpoints, got {len(checkpoints)}")
    if len(counts) != len(checkpoints) or any(n <= 0 for n in checkpoints):
        raise InsufficientData("checkpoints and counts must pair up with positive N")
    freqs = [c / n for c, n in zip(counts, checkpoints)]
    n_final = checkpoints[-1]
    tail = [f for n, f in zip(checkpoints, freqs) if n >= tail_fraction * n_final]
    osc = max(tail) - min(tail)
    ci = stats.binomtest(counts[-1], n_final).proportion_ci(confidence, method="wilson")
    return ConvergenceReport(label, tuple(checkpoints), tuple(freqs), osc, (ci.high - ci.low) / 2, factor)


def stream_counts(stream: np.ndarray, checkpoints: Sequence[int]) -> list[int]:
    cum = np.cumsum(np.asarray(stream, dtype=np.int64))
    return [int(cum[n - 1]) for n in checkpoints]


def bernoulli_stream(p: float, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random(n) < p


def block_oscillation_stream(n: int, first_block: int = 64) -> np.ndarray:
    """Alternating runs of ones and zeros, each run as long as everything before it.

    The running frequency swings between about 1/3 and 2/3 forever.
    """
    out = np.zeros(n, dtype=bool)
    pos, length, value = 0, first_block, True
    while pos < n:
        out[pos:pos + length] = value
        pos += length
        length, value = pos, not value
    return out


def interference_leak_stream(p: float, re_d: float, gain: float, n: int, seed: int,
                             first_block: int = 64) -> np.ndarray:
    """Non-physical toy stream for exercising the convergence diagnostics.

    Success probability alternates between ``p + gain*|re_d|`` and
    ``p - gain*|re_d|`` over runs that double in length. ``gain`` is a free
    parameter with no physical calibration.
    """
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    probs = np.empty(n)
    pos, length, sign = 0, first_block, 1.0
    while pos < n:
        probs[pos:pos + length] = np.clip(p + sign * gain * abs(re_d), 0.0, 1.0)
        pos += length
        length, sign = pos, -sign
    return u < probs


@dataclass(frozen=True)
class RuleComparison:
    first: int
    second: int
    count: int
    trials: int
    contextual: float
    standard: float

    @property
    def frequency(self) -> float:
        return self.count / self.trials

    @property
    def defect(self) -> float:
        """Standard minus contextual: the interference summed over cell pairs."""
        return self.standard - self.contextual

    def standard_error(self, q: float) -> float:
        return math.sqrt(max(q * (1 - q), 0.0) / self.trials)

    def z(self, q: float) -> float:
        se = self.standard_error(q)
        diff = self.frequency - q
        if se == 0:
            return 0.0 if diff == 0 else math.copysign(math.inf, diff)
        return diff / se

    @property
    def z_contextual(self) -> float:
        return self.z(self.contextual)

    @property
    def z_standard(self) -> float:
        return self.z(self.standard)


def _check_sharp(spec: TwoTimeSpec) -> None:
    if spec.kind is not OperatorKind.SHARP:
        raise PreconditionError("frequency simulations use sharp device cells")


def compare_rules(table: FrequencyTable, spec: TwoTimeSpec) -> list[RuleComparison]:
    """Empirical frequencies beside the contextual and merged-projector predictions."""
    _check_sharp(spec)
    if table.first_sets != spec.first.sets or table.second_sets != spec.second.sets:
        raise PartitionMismatch("table and spec use different sample sets")
    if table.resolution is not None and not math.isclose(table.resolution, spec.first.delta):
        raise PartitionMismatch("device resolution differs from the partition cell size")
    out = []
    for i in range(len(spec.first.sets)):
        for j in range(len(spec.second.sets)):
            out.append(RuleComparison(i, j, int(table.counts[i, j]), table.total,
                                      contextual_two_time(spec, i, j), standard_two_time(spec, i, j)))
    return out


@dataclass(frozen=True)
class FilterDeviceReport:
    trials: int
    filter_passes: int
    device_hits: int
    standard: float
    contextual: float

    @property
    def filter_rate(self) -> float:
        return self.filter_passes / self.trials

    @property
    def device_rate(self) -> float:
        return self.device_hits / self.trials

    @property
    def difference(self) -> float:
        return self.filter_rate - self.device_rate

    @property
    def theoretical_difference(self) -> float:
        return self.standard - self.contextual

    def _se(self, q: float) -> float:
        return math.sqrt(max(q * (1 - q), 0.0) / self.trials)

    @property
    def z_filter(self) -> float:
        se = self._se(self.standard)
        return (self.filter_rate - self.standard) / se if se else 0.0

    @property
    def z_device(self) -> float:
        se = self._se(self.contextual)
        return (self.device_rate - self.contextual) / se if se else 0.0

    @property
    def z_difference(self) -> float:
        """Significance of the empirical rate difference."""
        se = math.hypot(self._se(self.filter_rate), self._se(self.device_rate))
        return self.difference / se if se else 0.0

    @property
    def z_theory(self) -> float:
        """Empirical rate difference against the predicted one."""
        se = math.hypot(self._se(self.standard), self._se(self.contextual))
        return (self.difference - self.theoretical_difference) / se if se else 0.0


def filter_vs_device(spec: TwoTimeSpec, i: int, j: int, trials: int, seed: int,
                     workers: int = 1) -> FilterDeviceReport:
    """Two slit filters for ``U_i``, ``U_j`` against a full recorder sampled into ``U_i x U_j``."""
    _check_sharp(spec)
    slits = Sampler(spec, SlitFilter(spec.first.sets[i]), SlitFilter(spec.second.sets[j]))
    filt = slits.run(seed, trials, workers, stream=1)
    rec1 = FullRecorder(spec.first.delta, spec.first.origin)
    rec2 = FullRecorder(spec.second.delta, spec.second.origin)
    log = Sampler(spec, rec1, rec2).run(seed, trials, workers, stream=2)
    table = accumulate(log, (spec.first.sets[i],), (spec.second.sets[j],))
    passes = int(np.count_nonzero((filt.first == 0) & (filt.second == 0)))
    return FilterDeviceReport(trials, passes, int(table.counts[0, 0]),
                              standard_two_time(spec, i, j), contextual_two_time(spec, i, j))


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    pvalue: float
    bins: int


def cell_chi_square(log: TrialLog, sampler: Sampler, min_expected: float = 5.0) -> ChiSquareResult:
    """Goodness of fit of cell-level joint counts against the tabulated law.

    Cells with expected count below ``min_expected`` are pooled into one bin.
    """
    if log.device1 != sampler.device1 or log.device2 != sampler.device2:
        raise PartitionMismatch("log and sampler use different devices")
    n = len(log)
    shape = (sampler.joint.shape[0] + 1, sampler.joint.shape[1] + 1)
    probs = np.zeros(shape)
    probs[:-1, :-1] = sampler.joint
    w = sampler.first_weights
    if isinstance(sampler.device1, SlitFilter):
        probs[-1, -1] = max(1 - w.sum(), 0.0)
    if isinstance(sampler.device2, SlitFilter):
        probs[:-1, -1] = np.clip(w - sampler.joint.sum(axis=1), 0.0, None)
    probs /= probs.sum()
    observed = np.zeros(shape, dtype=np.int64)
    np.add.at(observed, (log.first, log.second), 1)
    expected = (probs * n).ravel()
    observed = observed.ravel()
    small = expected < min_expected
    exp_bins = np.append(expected[~small], expected[small].sum())
    obs_bins = np.append(observed[~small], observed[small].sum())
    if exp_bins[-1] == 0:
        exp_bins, obs_bins = exp_bins[:-1], obs_bins[:-1]
    res = stats.chisquare(obs_bins, exp_bins * obs_bins.sum() / exp_bins.sum())
    return ChiSquareResult(float(res.statistic), len(exp_bins) - 1, float(res.pvalue), len(exp_bins))
