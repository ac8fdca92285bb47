"""Scenario runners behind the CLI subcommands.

Each runner turns a validated :class:`~twotime.config.ExperimentConfig` into
tidy rows ``(table, key, quantity, value, unit, rule)`` plus a small summary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import frequency_lab as fl
from . import gaussian_analytic as ga
from .config import ExperimentConfig
from .errors import OutOfRange
from .state_space import (
    OperatorKind,
    PositionGrid,
    evolve,
    make_gaussian_state,
    make_measurement_operator,
)
from .two_time import (
    SamplePartition,
    SampleSet,
    TwoTimeSpec,
    additivity_defect,
    boundary_ambiguity_bound,
    consistency_scan,
    contextual_two_time,
    decoherence_functional,
    overcompleteness,
    partition_consistent,
    resolution_comparison,
    single_time_probability,
    standard_two_time,
)

# rule labels carried by every row
SINGLE = "single-time-born"
STANDARD = "sequential-projector"
CONTEXTUAL = "cell-resolved"
DECOHERENCE = "decoherence-functional"
RESOLUTION = "resolution-difference"
CLOSED_POINT = "closed-form-point"
CLOSED_INTERFERENCE = "closed-form-interference"
CLOSED_PARAMS = "closed-form-parameters"
CLOSED_COARSE = "closed-form-coarse"
NUMERIC = "numeric-engine"
EMPIRICAL = "empirical-count"
DIAGNOSTIC = "diagnostic"

DIMLESS = "dimensionless"


@dataclass
class Results:
    rows: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, table: str, key: str, quantity: str, value, unit: str, rule: str) -> None:
        if isinstance(value, (np.floating, np.integer)):
            value = value.item()
        self.rows.append((table, key, quantity, value, unit, rule))

    def tables(self) -> dict[str, list[dict]]:
        out: dict[str, list[dict]] = {}
        for table, key, quantity, value, unit, rule in self.rows:
            out.setdefault(table, []).append(
                {"key": key, "quantity": quantity, "value": value, "unit": unit, "rule": rule})
        return out


@dataclass(frozen=True, eq=False)
class Setup:
    config: ExperimentConfig
    grid: PositionGrid
    spec: TwoTimeSpec

    @property
    def kind(self) -> OperatorKind:
        return self.spec.kind


def build(config: ExperimentConfig) -> Setup:
    """Construct grid, state and partitions; raises on any violated precondition."""
    g = config.grid
    grid = PositionGrid(g.x_min, g.x_max, g.n_points)
    s = config.state
    state = make_gaussian_state(grid, s.sigma, s.p, s.center)
    dev = config.device
    first = SamplePartition.from_boundaries(grid, config.partition.first, dev.delta, dev.origin)
    second = SamplePartition.from_boundaries(grid, config.partition.second, dev.delta, dev.origin)
    for part in (first, second):
        for cells in part.cells:
            for lo, hi in cells:
                make_measurement_operator(grid, dev.kind, (lo + hi) / 2, dev.delta)
    d = config.dynamics
    spec = TwoTimeSpec(state, d.mass, d.t1, d.t2, first, second, OperatorKind(dev.kind))
    return Setup(config, grid, spec)


def _set_key(i: int) -> str:
    return f"U{i}"


def run_single_time(setup: Setup) -> Results:
    res = Results()
    spec = setup.spec
    rho_t2 = evolve(spec.state, spec.mass, spec.t2)
    for label, state, part, t in (("t1", spec.state_t1, spec.first, spec.t1),
                                  ("t2", rho_t2, spec.second, spec.t2)):
        for i, s in enumerate(part.sets):
            key = f"{label}:{_set_key(i)}={s}"
            res.add("single_time", key, "probability", single_time_probability(state, s), DIMLESS, SINGLE)
    res.summary["sets_t1"] = len(spec.first.sets)
    res.summary["sets_t2"] = len(spec.second.sets)
    return res


def run_two_time(setup: Setup) -> Results:
    res = Results()
    spec = setup.spec
    n1, n2 = len(spec.first.sets), len(spec.second.sets)
    for i in range(n1):
        for j in range(n2):
            key = f"{_set_key(i)},{_set_key(j)}"
            std = standard_two_time(spec, i, j)
            ctx = contextual_two_time(spec, i, j)
            res.add("two_time", key, "standard", std, DIMLESS, STANDARD)
            res.add("two_time", key, "contextual", ctx, DIMLESS, CONTEXTUAL)
            res.add("two_time", key, "standard_minus_contextual", std - ctx, DIMLESS, DIAGNOSTIC)
    for j in range(n2):
        for a in range(n1):
            for b in range(a + 1, n1):
                key = f"{_set_key(a)}+{_set_key(b)},{_set_key(j)}"
                d = decoherence_functional(spec, a, b, j)
                res.add("decoherence", key, "re_d", d.real, DIMLESS, DECOHERENCE)
                res.add("decoherence", key, "im_d", d.imag, DIMLESS, DECOHERENCE)
                res.add("decoherence", key, "additivity_defect", additivity_defect(spec, a, b, j),
                        DIMLESS, STANDARD)
    smallest = min(s.length for s in spec.first.sets + spec.second.sets)
    res.summary["contextual_total"] = overcompleteness(spec)
    res.summary["boundary_ambiguity_bound"] = boundary_ambiguity_bound(smallest, spec.first.delta)
    return res


def _coarse_pair(setup: Setup, size: float, x1: float, offset: float, delta: float) -> TwoTimeSpec:
    spec = setup.spec
    drift = setup.config.state.p * spec.tau / spec.mass
    half = size / 2
    u1 = SampleSet.interval(x1 - half, x1 + half)
    x2 = x1 + drift + offset
    u2 = SampleSet.interval(x2 - half, x2 + half)
    first = SamplePartition.single(setup.grid, u1, delta, origin=x1 - half)
    second = SamplePartition.single(setup.grid, u2, delta, origin=x2 - half)
    return replace(spec, first=first, second=second)


def run_epsilon_scan(setup: Setup) -> Results:
    res = Results()
    cfg = setup.config
    scan = cfg.scan
    delta = cfg.device.delta
    if scan.deltas:
        series = [("delta", d, 0.0, d) for d in scan.deltas]
    else:
        offsets = scan.offsets if scan.offsets else list(np.linspace(-2 * scan.size, 2 * scan.size, 41))
        series = [("offset", off, off, delta) for off in offsets]
    eps, offs = [], []
    for axis, value, offset, d in series:
        cmp = resolution_comparison(_coarse_pair(setup, scan.size, scan.x1, offset, d), 0, 0)
        key = f"{axis}={value:.17g}"
        unit = "length"
        res.add("epsilon_scan", key, axis, value, unit, DIAGNOSTIC)
        res.add("epsilon_scan", key, "p_delta", cmp.p_fine, DIMLESS, CONTEXTUAL)
        res.add("epsilon_scan", key, "p_2delta", cmp.p_coarse, DIMLESS, CONTEXTUAL)
        res.add("epsilon_scan", key, "epsilon", cmp.epsilon, DIMLESS, RESOLUTION)
        res.add("epsilon_scan", key, "interference_sum", cmp.interference_sum, DIMLESS, DECOHERENCE)
        res.add("epsilon_scan", key, "epsilon_over_p", cmp.epsilon / cmp.p_fine if cmp.p_fine else math.nan,
                DIMLESS, RESOLUTION)
        eps.append(cmp.epsilon)
        offs.append(offset)
    if not scan.deltas:
        res.summary["measured_period"] = ga.oscillation_period(offs, eps)
        spec = setup.spec
        example = ga.GaussianExample(cfg.state.sigma, cfg.state.p, spec.mass, delta, spec.tau)
        res.summary["closed_form_period"] = ga.closed_form_period(example)
    return res


def run_gaussian_analytic(setup: Setup) -> Results:
    res = Results()
    cfg = setup.config
    spec = setup.spec
    base = ga.GaussianExample(cfg.state.sigma, cfg.state.p, spec.mass, cfg.device.delta, spec.tau)
    examples = [("config", base)] + [
        (f"r={r:.17g}", replace(base, t=base.m * base.delta**2 / r)) for r in cfg.analytic.r_values]
    for label, ex in examples:
        prm = ga.derived_params(ex)
        for name in ("r", "a", "b", "c"):
            res.add("parameters", label, name, getattr(prm, name), DIMLESS, CLOSED_PARAMS)
        res.add("parameters", label, "delta_over_sigma", ex.delta_ratio, DIMLESS, DIAGNOSTIC)
        res.add("parameters", label, "valid", int(ex.valid), DIMLESS, DIAGNOSTIC)
        cmp = ga.compare_point_forms(ex, span=cfg.analytic.span)
        res.add("point_forms", label, "fitted_exponent", cmp.fitted_exponent, "1/length^2", NUMERIC)
        res.add("point_forms", label, "closed_exponent", cmp.closed_exponent, "1/length^2", CLOSED_POINT)
        res.add("point_forms", label, "exponent_deviation", cmp.exponent_deviation, DIMLESS, DIAGNOSTIC)
        res.add("point_forms", label, "modulus_ratio", cmp.modulus_ratio, DIMLESS, NUMERIC)
        res.add("point_forms", label, "closed_modulus_ratio", cmp.closed_modulus_ratio, DIMLESS,
                CLOSED_INTERFERENCE)
        res.add("point_forms", label, "modulus_deviation", cmp.modulus_deviation, DIMLESS, DIAGNOSTIC)
        res.add("point_forms", label, "prefactor_ratio", cmp.prefactor_ratio, DIMLESS, DIAGNOSTIC)
        res.add("point_forms", label, "phase_slope", cmp.phase_slope, DIMLESS, NUMERIC)
        size = cfg.analytic.coarse_size
        scan = ga.epsilon_scan(ex, size, [0.0])
        k, k_prime = ga.calibrate_constants(ex, size, float(scan.p_fine[0]), float(scan.epsilon[0]))
        res.add("coarse", label, "k", k, DIMLESS, CLOSED_COARSE)
        res.add("coarse", label, "k_prime", k_prime, DIMLESS, CLOSED_COARSE)
        res.add("coarse", label, "epsilon_over_p", float(scan.ratio[0]), DIMLESS, NUMERIC)
    return res


def run_consistency_scan(setup: Setup) -> Results:
    res = Results()
    reports = consistency_scan(setup.spec, setup.config.run.tolerance)
    for r in reports:
        key = f"{_set_key(r.pair[0])}+{_set_key(r.pair[1])},{_set_key(r.target)}"
        res.add("consistency", key, "re_d", r.d.real, DIMLESS, DECOHERENCE)
        res.add("consistency", key, "relative_re_d", r.relative, DIMLESS, DIAGNOSTIC)
        res.add("consistency", key, "consistent", int(r.consistent), DIMLESS, DIAGNOSTIC)
    res.summary["consistent"] = partition_consistent(reports)
    res.summary["max_relative_re_d"] = max((r.relative for r in reports), default=0.0)
    return res


def run_frequency(setup: Setup) -> Results:
    res = Results()
    cfg = setup.config
    spec = setup.spec
    recorder1 = fl.FullRecorder(spec.first.delta, spec.first.origin)
    recorder2 = fl.FullRecorder(spec.second.delta, spec.second.origin)
    sampler = fl.Sampler(spec, recorder1, recorder2)
    log = sampler.run(cfg.run.seed, cfg.run.trials, cfg.run.workers)
    checkpoints = cfg.run.checkpoints or fl.checkpoint_schedule(cfg.run.trials)
    checkpoints = [n for n in checkpoints if n <= cfg.run.trials]
    first, second = spec.first.sets, spec.second.sets
    fl.verify_frequency_axioms(log, first, second, checkpoints)
    tables = fl.accumulate_checkpoints(log, first, second, checkpoints)
    final = tables[-1]
    for n, table in zip(checkpoints, tables):
        for i in range(len(first)):
            for j in range(len(second)):
                res.add("counts", f"N={n};{_set_key(i)},{_set_key(j)}", "count", int(table.counts[i, j]),
                        "count", EMPIRICAL)
    verdicts = []
    for i in range(len(first)):
        for j in range(len(second)):
            key = f"{_set_key(i)},{_set_key(j)}"
            rep = fl.convergence_report(checkpoints, [int(t.counts[i, j]) for t in tables], key)
            verdicts.append(rep.verdict)
            res.add("convergence", key, "oscillation", rep.oscillation, DIMLESS, DIAGNOSTIC)
            res.add("convergence", key, "half_width", rep.half_width, DIMLESS, DIAGNOSTIC)
            res.add("convergence", key, "converged", int(rep.verdict == "converged"), DIMLESS, DIAGNOSTIC)
    for c in fl.compare_rules(final, spec):
        key = f"{_set_key(c.first)},{_set_key(c.second)}"
        res.add("rules", key, "frequency", c.frequency, DIMLESS, EMPIRICAL)
        res.add("rules", key, "contextual", c.contextual, DIMLESS, CONTEXTUAL)
        res.add("rules", key, "standard", c.standard, DIMLESS, STANDARD)
        res.add("rules", key, "defect", c.defect, DIMLESS, DECOHERENCE)
        res.add("rules", key, "z_contextual", c.z_contextual, DIMLESS, DIAGNOSTIC)
        res.add("rules", key, "z_standard", c.z_standard, DIMLESS, DIAGNOSTIC)
    chi = fl.cell_chi_square(log, sampler)
    res.summary.update(trials=cfg.run.trials, chi_square=chi.statistic, chi_square_dof=chi.dof,
                       chi_square_pvalue=chi.pvalue, converged=verdicts.count("converged"),
                       inconclusive=verdicts.count("inconclusive"))
    return res


def run_filter_vs_device(setup: Setup) -> Results:
    res = Results()
    cfg = setup.config
    spec = setup.spec
    pairs = cfg.run.pairs or [(i, j) for i in range(len(spec.first.sets)) for j in range(len(spec.second.sets))]
    n1, n2 = len(spec.first.sets), len(spec.second.sets)
    for i, j in pairs:
        if not (0 <= i < n1 and 0 <= j < n2):
            raise OutOfRange(f"run.pairs entry ({i}, {j}) outside {n1} x {n2} sets")
    for i, j in pairs:
        rep = fl.filter_vs_device(spec, i, j, cfg.run.trials, cfg.run.seed, cfg.run.workers)
        key = f"{_set_key(i)},{_set_key(j)}"
        res.add("filter_vs_device", key, "filter_rate", rep.filter_rate, DIMLESS, EMPIRICAL)
        res.add("filter_vs_device", key, "device_rate", rep.device_rate, DIMLESS, EMPIRICAL)
        res.add("filter_vs_device", key, "standard", rep.standard, DIMLESS, STANDARD)
        res.add("filter_vs_device", key, "contextual", rep.contextual, DIMLESS, CONTEXTUAL)
        res.add("filter_vs_device", key, "difference", rep.difference, DIMLESS, EMPIRICAL)
        res.add("filter_vs_device", key, "theoretical_difference", rep.theoretical_difference, DIMLESS,
                DECOHERENCE)
        res.add("filter_vs_device", key, "z_filter", rep.z_filter, DIMLESS, DIAGNOSTIC)
        res.add("filter_vs_device", key, "z_device", rep.z_device, DIMLESS, DIAGNOSTIC)
        res.add("filter_vs_device", key, "z_difference", rep.z_difference, DIMLESS, DIAGNOSTIC)
    res.summary["pairs"] = len(pairs)
    return res


RUNNERS: dict[str, Callable[[Setup], Results]] = {
    "single-time": run_single_time,
    "two-time": run_two_time,
    "epsilon-scan": run_epsilon_scan,
    "gaussian-analytic": run_gaussian_analytic,
    "consistency-scan": run_consistency_scan,
    "frequency": run_frequency,
    "filter-vs-device": run_filter_vs_device,
}
