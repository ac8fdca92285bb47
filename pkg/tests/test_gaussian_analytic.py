import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twotime.errors import PreconditionError
from twotime.gaussian_analytic import (
    CoarseSetSpec,
    GaussianExample,
    calibrate_constants,
    closed_form_interference,
    closed_form_period,
    closed_form_point_probability,
    coarse_set_estimates,
    compare_point_forms,
    derived_params,
    epsilon_scan,
    example_grid,
    fit_gaussian_exponent,
    oscillation_period,
    params_from_r,
)


def example(r=1.0, p=0.0, sigma=4.0, delta=0.1, m=1.0):
    return GaussianExample(sigma, p, m, delta, m * delta**2 / r)


# derived parameters


def test_parameters_at_r_one():
    prm = params_from_r(1.0)
    assert (prm.a, prm.b, prm.c) == (1.5, 0.0, 0.25)


def test_parameters_small_r_limit():
    prm = params_from_r(1e-12)
    assert prm.a == pytest.approx(1.0, abs=1e-11)
    assert prm.b == pytest.approx(0.0, abs=1e-11)
    assert prm.c == pytest.approx(0.0, abs=1e-11)


def test_time_of_flight_parameter():
    assert derived_params(GaussianExample(4.0, 0.0, 1.0, 0.1, 0.01)).r == pytest.approx(1.0, rel=1e-15)


@given(st.floats(1e-6, 1e6))
def test_a_range(r):
    prm = params_from_r(r)
    assert prm.a - 1 == pytest.approx(2 * r / (1 + r) ** 2, rel=1e-12)
    assert 1.0 <= prm.a <= 1.5


def test_example_preconditions_and_flags():
    with pytest.raises(PreconditionError):
        GaussianExample(4.0, 0.0, 1.0, 0.1, 0.0)
    ex = example()
    assert ex.valid and ex.delta_ratio == pytest.approx(0.025)
    assert not any(ex.in_regime(x) for x in np.linspace(0, 4, 41))  # 10 delta > sigma / 10
    wide = example(sigma=40.0)
    assert wide.in_regime(2.0) and not wide.in_regime(0.5) and not wide.in_regime(5.0)
    assert not GaussianExample(0.5, 0.0, 1.0, 0.1, 0.01).valid


# closed forms


def test_point_probability_on_classical_path():
    ex = example(r=2.0, p=1.5)
    prm = derived_params(ex)
    value = closed_form_point_probability(ex, 0.3, 0.3 + ex.drift)
    assert value == pytest.approx(math.pi * ex.delta_ratio * prm.r / (1 + prm.r), rel=1e-15)


@pytest.mark.parametrize("r,offset", [(0.5, 0.03), (1.0, 0.1), (3.0, 0.07)])
def test_point_probability_log_ratio(r, offset):
    ex = example(r=r, p=0.7)
    a = derived_params(ex).a
    x = 0.4
    base = x + ex.drift
    v1 = closed_form_point_probability(ex, x, base + offset)
    v2 = closed_form_point_probability(ex, x, base + 2 * offset)
    assert math.log(v2 / v1) == pytest.approx(-3 * a / (4 * ex.delta**2) * offset**2, rel=1e-12)


def test_point_probability_parity():
    ex, mirror = example(r=0.7, p=1.2), example(r=0.7, p=-1.2)
    for x, xp in [(0.3, 0.35), (-0.2, 0.1), (0.0, 0.05)]:
        assert closed_form_point_probability(ex, x, xp) == pytest.approx(
            closed_form_point_probability(mirror, -x, -xp), rel=1e-14)


@pytest.mark.parametrize("r", [0.3, 1.0, 2.5])
def test_interference_modulus_ratio(r):
    ex = example(r=r, p=0.4)
    xs = np.linspace(0.1, 0.3, 5)
    d = closed_form_interference(ex, 0.2, xs)
    p = closed_form_point_probability(ex, 0.2, xs)
    np.testing.assert_allclose(np.abs(d) / p, math.exp(-derived_params(ex).c), rtol=1e-14)
    if r == 1.0:
        assert math.exp(-0.25) == pytest.approx(0.7788, abs=1e-4)


def test_interference_phase_small_r():
    ex = example(r=1e-12, p=2.0)
    d = closed_form_interference(ex, 0.0, 0.05 + ex.drift)
    assert cmath.phase(d) == pytest.approx(2.0 * ex.delta, abs=1e-9)


def test_coarse_estimate_cosine_zero():
    ex = example(r=1.0, p=math.pi / 2 / 0.1)
    coarse = CoarseSetSpec(0.0, ex.drift, 1.2)
    est = coarse_set_estimates(ex, coarse)
    assert abs(est.epsilon) < 1e-15 and est.p > 0


def test_coarse_estimate_ratio_is_calibration_ratio():
    ex = example(r=1e-9)
    coarse = CoarseSetSpec(0.0, ex.drift, 1.2)
    est = coarse_set_estimates(ex, coarse, k=2.0, k_prime=-1.5)
    assert est.ratio == pytest.approx(-0.75, rel=1e-12)
    assert coarse.large_vs_delta(ex) and coarse.small_vs_sigma(ex)


def test_calibration_round_trip():
    ex = example(r=0.5)
    size = 1.2
    k, kp = calibrate_constants(ex, size, 0.6, -0.45)
    est = coarse_set_estimates(ex, CoarseSetSpec(0.0, ex.drift, size), k, kp)
    assert (est.p, est.epsilon) == pytest.approx((0.6, -0.45), rel=1e-14)


def test_closed_form_period():
    assert closed_form_period(example(r=0.5)) == pytest.approx(2 * math.pi * 0.1 / 0.2, rel=1e-12)
    assert math.isinf(closed_form_period(example(r=1.0)))


# numeric cross-checks


def test_example_grid_resolves_delta():
    ex = example()
    g = example_grid(ex)
    assert g.dx == pytest.approx(ex.delta / 4, rel=1e-14)
    assert g.n_points & (g.n_points - 1) == 0
    assert g.x_max >= 6 * ex.sigma


def test_fit_gaussian_exponent_exact():
    off = np.linspace(-1, 1, 11)
    assert fit_gaussian_exponent(off, 3 * np.exp(-2.5 * off**2)) == pytest.approx(-2.5, rel=1e-12)


@pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
def test_numeric_point_forms_match_wide_packet_limit(r):
    # oracle: for sigma >> delta the incoming packet is a plane wave, the first
    # operator prepares a width-delta packet and the answer is a Gaussian
    # convolution with variance delta^2 (1 + 3 r^2) / (2 r^2)
    cmp = compare_point_forms(example(r=r))
    d = 0.1
    assert cmp.fitted_exponent == pytest.approx(-r**2 / (d**2 * (1 + 3 * r**2)), rel=1e-3)
    assert cmp.phase_slope == pytest.approx(-r / (1 + 3 * r**2), rel=1e-3)
    assert cmp.modulus_ratio == pytest.approx(math.exp(-3 * r**2 / (4 * (1 + 3 * r**2))), rel=1e-3)
    assert math.isfinite(cmp.exponent_deviation) and math.isfinite(cmp.prefactor_ratio)


def test_epsilon_same_order_as_probability():
    ex = example(r=0.5)
    scan = epsilon_scan(ex, 1.2, [0.0])
    assert 0.05 <= abs(scan.ratio[0]) <= 20
    assert scan.epsilon[0] == scan.p_fine[0] - scan.p_coarse[0]


def test_oscillation_period_on_a_cosine():
    off = np.linspace(-5, 5, 401)
    assert oscillation_period(off, np.cos(2 * math.pi * off / 1.7)) == pytest.approx(1.7, rel=1e-3)
    assert math.isinf(oscillation_period(off, np.exp(-(off**2))))
