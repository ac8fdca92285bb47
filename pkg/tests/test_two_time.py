import math

import numpy as np
import pytest
from scipy.integrate import quad

from twotime.errors import AlignmentError, OutOfRange, PreconditionError
from twotime.state_space import (
    DensityMatrix,
    OperatorKind,
    PositionGrid,
    PureState,
    evolve,
    make_gaussian_state,
    make_measurement_operator,
)
from twotime.two_time import (
    SamplePartition,
    SampleSet,
    TwoTimeSpec,
    additivity_defect,
    boundary_ambiguity_bound,
    consistency_scan,
    contextual_two_time,
    decoherence_functional,
    lattice_index,
    overcompleteness,
    partition_consistent,
    point_interference,
    point_probabilities,
    resolution_comparison,
    resolution_difference,
    single_time_probability,
    standard_two_time,
)

import oracles

MASS, T1, T2 = 1.0, 0.1, 0.35


@pytest.fixture(scope="module")
def grid():
    return PositionGrid(-8.0, 8.0, 128)


@pytest.fixture(scope="module")
def superposition(grid):
    a = make_gaussian_state(grid, 0.8, 1.5, center=-1.0)
    b = make_gaussian_state(grid, 0.8, -1.0, center=1.0)
    return PureState.normalized(grid, a.amplitudes + 0.7j * b.amplitudes)


@pytest.fixture(scope="module")
def mixed(grid):
    a = make_gaussian_state(grid, 0.8, 1.5, center=-1.0)
    b = make_gaussian_state(grid, 1.0, -0.5, center=0.5)
    return DensityMatrix.mixture([a, b], [0.35, 0.65])


def make_spec(grid, state, first, second, delta=0.25, kind="sharp", t1=T1, t2=T2):
    return TwoTimeSpec(state, MASS, t1, t2,
                       SamplePartition.from_boundaries(grid, first, delta),
                       SamplePartition.from_boundaries(grid, second, delta), kind)


def dense(spec):
    """Operator form of rho(t1) and the dense free propagator over the flight."""
    g = spec.grid
    u1 = oracles.dft_unitary(g.x_min, g.x_max, g.n_points, spec.mass, spec.t1)
    if isinstance(spec.state, PureState):
        rho = oracles.operator_from_amplitudes(spec.state.amplitudes, g.dx)
    else:
        rho = spec.state.elements * g.dx
    u = oracles.dft_unitary(g.x_min, g.x_max, g.n_points, spec.mass, spec.tau)
    return u1 @ rho @ u1.conj().T, u


def ind(grid, s):
    return oracles.indicator(grid.x, s.lower, s.upper, grid.dx)


FIRST = [-2.0, -1.0, 0.0, 0.5, 1.5]
SECOND = [-3.0, -1.0, 0.0, 1.0, 3.0]


# sample sets and partitions


def test_sample_set_cells_and_lattice():
    s = SampleSet(((1.0, 2.0), (-1.0, -0.5)))
    assert s.intervals == ((-1.0, -0.5), (1.0, 2.0))
    assert s.length == 1.5
    assert s.cells(0.5) == [(-1.0, -0.5), (1.0, 1.5), (1.5, 2.0)]
    assert lattice_index(0.75, 0.25, 0.0) == 3
    with pytest.raises(AlignmentError):
        lattice_index(0.3, 0.25, 0.0)
    with pytest.raises(PreconditionError):
        SampleSet(((0.0, 1.0), (0.5, 2.0)))


def test_partition_preconditions(grid):
    with pytest.raises(AlignmentError):
        SamplePartition.from_boundaries(grid, [0.0, 0.3], 0.25)
    with pytest.raises(OutOfRange):
        SamplePartition.from_boundaries(grid, [0.0, 9.0], 0.25)
    with pytest.raises(PreconditionError, match="overlap"):
        SamplePartition(grid, (SampleSet.interval(0, 1), SampleSet.interval(0.5, 2)), 0.25)
    part = SamplePartition.from_boundaries(grid, [-8.0, 0.0, 8.0], 0.5)
    assert part.complete
    assert len(part.cells[0]) == 16
    np.testing.assert_allclose(part.centers(1)[:2], [0.25, 0.75])


def test_spec_requires_ordered_times(grid, superposition):
    with pytest.raises(PreconditionError):
        make_spec(grid, superposition, FIRST, SECOND, t1=0.3, t2=0.3)


# single-time probabilities


def test_single_time_whole_line(grid, superposition):
    assert single_time_probability(superposition, SampleSet.whole_line(grid)) == pytest.approx(1.0, abs=1e-12)


def test_single_time_half_line_symmetric():
    dx = 32.0 / 1024
    g = PositionGrid(-16.0 + dx / 2, 16.0 + dx / 2, 1024)
    psi = make_gaussian_state(g, 1.0, 0.0)
    assert single_time_probability(psi, SampleSet.interval(g.x_min, 0.0)) == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("half", [1 / math.sqrt(2), 0.5, 1.25])
def test_single_time_against_quadrature(half):
    # cell edges land exactly on the interval ends when points sit at half-grid positions
    n = 4096
    dx = 32.0 / n
    g = PositionGrid(-16.0 + dx / 2, 16.0 + dx / 2, n)
    psi = make_gaussian_state(g, 1.0, 0.0)
    lo = -round(half / dx) * dx
    value, _ = quad(lambda x: math.exp(-(x**2)) / math.sqrt(math.pi), lo, -lo)
    assert single_time_probability(psi, SampleSet.interval(lo, -lo)) == pytest.approx(value, abs=1e-5)


# standard rule and decoherence functional


@pytest.mark.parametrize("state_name", ["superposition", "mixed"])
def test_standard_against_dense_oracle(request, grid, state_name):
    spec = make_spec(grid, request.getfixturevalue(state_name), FIRST, SECOND)
    rho, u = dense(spec)
    for i, si in enumerate(spec.first.sets):
        for j, sj in enumerate(spec.second.sets):
            want = oracles.two_time(rho, u, ind(grid, si), ind(grid, sj))
            assert standard_two_time(spec, i, j) == pytest.approx(want, abs=1e-12)


def test_standard_reduces_to_single_time(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, [-8.0, 8.0])
    for i, s in enumerate(spec.first.sets):
        assert standard_two_time(spec, i, 0) == pytest.approx(
            single_time_probability(spec.state_t1, s), abs=1e-12)
    spec = make_spec(grid, superposition, [-8.0, 8.0], SECOND)
    rho_t2 = evolve(superposition, MASS, T2)
    for j, s in enumerate(spec.second.sets):
        assert standard_two_time(spec, 0, j) == pytest.approx(single_time_probability(rho_t2, s), abs=1e-12)


def test_marginalization_over_complete_second_partition(grid, mixed):
    spec = make_spec(grid, mixed, FIRST, [-8.0, -1.0, 0.0, 2.0, 8.0])
    for i, s in enumerate(spec.first.sets):
        total = sum(standard_two_time(spec, i, j) for j in range(4))
        assert total == pytest.approx(single_time_probability(spec.state_t1, s), abs=1e-9)


@pytest.mark.parametrize("state_name", ["superposition", "mixed"])
def test_decoherence_against_dense_oracle(request, grid, state_name):
    spec = make_spec(grid, request.getfixturevalue(state_name), FIRST, SECOND)
    rho, u = dense(spec)
    sets = spec.first.sets
    for a in range(len(sets)):
        for b in range(len(sets)):
            if a == b:
                continue
            for j, sj in enumerate(spec.second.sets):
                want = oracles.decoherence(rho, u, ind(grid, sets[a]), ind(grid, sets[b]), ind(grid, sj))
                got = decoherence_functional(spec, a, b, j)
                assert abs(got - want) < 1e-12
                assert abs(got - np.conj(decoherence_functional(spec, b, a, j))) < 1e-10


def test_decoherence_vanishes_for_whole_line_target(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, [-8.0, 8.0])
    for a, b in [(0, 1), (1, 2), (0, 3)]:
        assert abs(decoherence_functional(spec, a, b, 0)) < 1e-12
        assert abs(additivity_defect(spec, a, b, 0)) < 1e-12


def test_block_diagonal_state_has_no_interference(grid):
    # each component lives entirely inside one first-time set
    x = grid.x
    left = np.where((x >= -2) & (x < -1), np.exp(-((x + 1.5) ** 2)), 0)
    right = np.where((x >= 0) & (x < 0.5), np.exp(-((x - 0.25) ** 2)), 0)
    rho = DensityMatrix.mixture([PureState.normalized(grid, left), PureState.normalized(grid, right)], [0.5, 0.5])
    spec = make_spec(grid, rho, FIRST, SECOND, t1=0.0)
    for j in range(len(spec.second.sets)):
        assert abs(decoherence_functional(spec, 0, 2, j)) < 1e-12
        assert abs(additivity_defect(spec, 0, 2, j)) < 1e-12


def test_additivity_defect_matches_dense_oracle(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, SECOND)
    rho, u = dense(spec)
    sets = spec.first.sets
    defects = []
    for a, b in [(0, 1), (1, 2), (2, 3)]:
        for j, sj in enumerate(spec.second.sets):
            merged = ind(grid, sets[a]) + ind(grid, sets[b])
            target = ind(grid, sj)
            want = (oracles.two_time(rho, u, merged, target)
                    - oracles.two_time(rho, u, ind(grid, sets[a]), target)
                    - oracles.two_time(rho, u, ind(grid, sets[b]), target))
            got = additivity_defect(spec, a, b, j)
            assert got == pytest.approx(want, abs=1e-12)
            defects.append(abs(got))
    assert max(defects) > 1e-3  # the configuration really interferes


def test_defect_needs_distinct_sets(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, SECOND)
    with pytest.raises(PreconditionError):
        additivity_defect(spec, 1, 1, 0)


# contextual rule


@pytest.mark.parametrize("kind", ["sharp", "smeared"])
def test_contextual_against_dense_oracle(grid, mixed, kind):
    spec = make_spec(grid, mixed, FIRST, SECOND, kind=kind)
    rho, u = dense(spec)

    def cells(part, i):
        return [make_measurement_operator(grid, kind, (lo + hi) / 2, part.delta).diagonal
                for lo, hi in part.cells[i]]

    for i in range(len(spec.first.sets)):
        for j in range(len(spec.second.sets)):
            want = oracles.cell_sum(rho, u, cells(spec.first, i), cells(spec.second, j))
            assert contextual_two_time(spec, i, j) == pytest.approx(want, abs=1e-12)


def test_single_cell_sets_reduce_to_standard(grid, superposition):
    b = [-1.0, -0.5, 0.0, 0.5, 1.0]
    spec = make_spec(grid, superposition, b, b, delta=0.5)
    for i in range(4):
        for j in range(4):
            assert contextual_two_time(spec, i, j) == pytest.approx(standard_two_time(spec, i, j), abs=1e-14)


@pytest.mark.parametrize("kind", ["sharp", "smeared"])
def test_contextual_merge_is_additive(grid, superposition, kind):
    spec = make_spec(grid, superposition, FIRST, SECOND, kind=kind)
    for a, b in [(0, 1), (1, 3), (0, 2)]:
        for j in range(len(spec.second.sets)):
            merged = contextual_two_time(spec, (a, b), j)
            parts = contextual_two_time(spec, a, j) + contextual_two_time(spec, b, j)
            assert abs(merged - parts) <= 2 * math.ulp(merged)


def test_contextual_completeness(grid, mixed):
    spec = make_spec(grid, mixed, FIRST, [-8.0, -2.0, 0.0, 8.0])
    for i in range(len(spec.first.sets)):
        total = sum(contextual_two_time(spec, i, j) for j in range(3))
        cells = sum(single_time_probability(spec.state_t1, SampleSet((c,))) for c in spec.first.cells[i])
        assert total == pytest.approx(cells, abs=1e-12)


def test_overcompleteness_sharp_complete_tiling(grid, superposition):
    spec = make_spec(grid, superposition, [-8.0, 0.0, 8.0], [-8.0, 8.0], delta=0.5)
    assert overcompleteness(spec) == pytest.approx(1.0, abs=1e-12)
    smeared = make_spec(grid, superposition, [-4.0, 0.0, 4.0], [-4.0, 4.0], delta=0.5, kind="smeared")
    assert overcompleteness(smeared) > 1.0


# resolution dependence


def test_epsilon_vanishes_for_whole_line_target(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, [-8.0, 8.0])
    for i in range(len(spec.first.sets)):
        assert abs(resolution_difference(spec, i, 0)) < 1e-10


def test_epsilon_vanishes_without_cell_coherence(grid):
    # diagonal kernel: no coherence between any two cells at t1 = 0
    dens = np.exp(-(grid.x**2))
    rho = DensityMatrix(grid, np.diag(dens / (dens.sum() * grid.dx)))
    spec = make_spec(grid, rho, FIRST, SECOND, t1=0.0)
    for i in range(len(spec.first.sets)):
        for j in range(len(spec.second.sets)):
            assert abs(resolution_difference(spec, i, j)) < 1e-12


def test_epsilon_against_dense_interference_sum(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, SECOND)
    rho, u = dense(spec)
    for i in range(len(spec.first.sets)):
        for j, sj in enumerate(spec.second.sets):
            target = ind(grid, sj)
            want = 0.0
            for lo, hi in spec.first.sets[i].cells(0.5):
                lower = oracles.indicator(grid.x, lo, lo + 0.25, grid.dx)
                upper = oracles.indicator(grid.x, lo + 0.25, hi, grid.dx)
                want -= 2 * oracles.decoherence(rho, u, upper, lower, target).real
            cmp = resolution_comparison(spec, i, j)
            assert cmp.epsilon == pytest.approx(want, abs=1e-12)
            assert cmp.p_fine == pytest.approx(contextual_two_time(spec, i, j), abs=1e-14)


def test_epsilon_smeared_coarse_cells_decompose(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, SECOND, kind="smeared")
    for i in range(len(spec.first.sets)):
        cmp = resolution_comparison(spec, i, 1)
        assert abs(cmp.epsilon - cmp.interference_sum) < 1e-9


def test_epsilon_needs_double_cell_alignment(grid, superposition):
    spec = make_spec(grid, superposition, [-0.25, 0.5], SECOND)
    with pytest.raises(AlignmentError):
        resolution_difference(spec, 0, 0)


# consistency


def test_single_set_partition_is_vacuously_consistent(grid, superposition):
    spec = make_spec(grid, superposition, [-2.0, 2.0], SECOND)
    reports = consistency_scan(spec)
    assert reports == [] and partition_consistent(reports)


def test_decoherent_state_passes_every_flag(grid):
    dens = np.exp(-(grid.x**2))
    rho = DensityMatrix(grid, np.diag(dens / (dens.sum() * grid.dx)))
    reports = consistency_scan(make_spec(grid, rho, FIRST, SECOND, t1=0.0))
    assert reports and partition_consistent(reports)
    for r in reports:
        assert r.defect == 2 * r.d.real


def test_coarse_graining_shrinks_interference():
    # measured max|Re d|/p: 0.58, 0.38, 0.26, 0.087, 0.084
    g = PositionGrid(-16.0, 16.0, 1024)
    psi = make_gaussian_state(g, 1.0, 0.0)
    final = SamplePartition.from_boundaries(g, [-16.0, -1.0, 1.0, 16.0], 0.25)
    worst = []
    for size in [0.25, 0.5, 1.0, 2.0, 4.0]:
        first = SamplePartition.from_boundaries(g, np.arange(-4.0, 4.0 + 1e-9, size), 0.25)
        reports = consistency_scan(TwoTimeSpec(psi, 1.0, 0.0, 0.0625, first, final))
        assert not partition_consistent(reports)
        worst.append(max(r.relative for r in reports))
    assert all(b < a for a, b in zip(worst, worst[1:]))


def test_consistency_scan_matches_decoherence_functional(grid, superposition):
    spec = make_spec(grid, superposition, FIRST, SECOND)
    for r in consistency_scan(spec):
        assert abs(r.d - decoherence_functional(spec, *r.pair, r.target)) < 1e-14


def test_boundary_ambiguity_bound():
    assert boundary_ambiguity_bound(1.0, 0.5) == pytest.approx(math.exp(-4))


# point quantities


def test_point_probabilities_match_cell_table(grid, superposition):
    spec = make_spec(grid, superposition, [0.0, 0.25], [-1.0, 1.0])
    table = spec.cell_table
    got = point_probabilities(superposition, MASS, T1, T2, 0.125, table.second_centers, 0.25)
    np.testing.assert_allclose(got, table.probabilities[0], atol=1e-14)


def test_point_interference_hermitian_partner(grid, superposition):
    d = point_interference(superposition, MASS, T1, T2, 0.25, [0.0, 0.5], 0.25, OperatorKind.SMEARED)
    assert d.shape == (2,)
    spec = make_spec(grid, superposition, [0.0, 0.5], [-1.0, 1.0])
    sharp = point_interference(superposition, MASS, T1, T2, 0.25, [0.125], 0.25)
    final = make_measurement_operator(grid, "sharp", 0.125, 0.25).diagonal
    rho, u = dense(spec)
    want = oracles.decoherence(rho, u, oracles.indicator(grid.x, 0.25, 0.5, grid.dx),
                               oracles.indicator(grid.x, 0.0, 0.25, grid.dx), final)
    assert abs(sharp[0] - want) < 1e-13
