from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vexflow.errors import ConfigurationError, SymmetryError
from vexflow.exponent import make_exponent_field
from vexflow.grid import build_domain
from vexflow.stress import (RegularizedStress, coercivity_constant, evaluate_stress, power_law, random_symmetric,
                            regularized_stress, table_law, tensor_norm, verify_assumptions,
                            young_identity_residual)

PT = np.array([0.3, 0.4])


def sym(rng, n=50, d=2, mags=(1e-3, 1e3)):
    return random_symmetric(rng, n, d, mags)


def test_zero_argument_gives_zero_stress():
    for s in (2.0, 3.5):
        model = power_law(1.0, 2.0, s)
        assert not evaluate_stress(model, 0.0, PT, np.zeros((2, 2))).any()


def test_newtonian_reduction(rng):
    xi = sym(rng)
    S = evaluate_stress(power_law(0.7, 0.0, 3.0), 0.0, np.broadcast_to(PT, (50, 2)), xi)
    assert np.allclose(S, 0.7 * xi, rtol=1e-15)


def test_unit_modulus_reduction(rng):
    xi = sym(rng, mags=(1.0, 1.0))
    S = evaluate_stress(power_law(0.2, 0.5, 3.7), 0.0, np.broadcast_to(PT, (50, 2)), xi)
    assert np.allclose(S, 0.7 * xi, rtol=1e-14)


def test_exponent_is_read_from_the_field():
    dom = build_domain((1.0, 1.0), 8, slabs=[0.0, 0.5, 1.0])
    s = make_exponent_field(dom, [2.0, 4.0])
    model = power_law(0.0, 1.0, s)
    xi = np.diag([3.0, 0.0])
    assert evaluate_stress(model, 0.2, PT, xi)[0, 0] == pytest.approx(3.0)
    assert evaluate_stress(model, 0.8, PT, xi)[0, 0] == pytest.approx(27.0)


def test_asymmetric_argument_is_rejected():
    with pytest.raises(SymmetryError):
        evaluate_stress(power_law(1.0, 0.0, 2.0), 0.0, PT, np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_invalid_viscosities():
    with pytest.raises(ConfigurationError):
        power_law(0.0, 0.0, 2.0)
    with pytest.raises(ConfigurationError):
        power_law(-1.0, 1.0, 2.0)


def test_zero_theta_matches_base_law(rng):
    model = power_law(0.3, 0.3, 3.1)
    xi = sym(rng)
    x = np.broadcast_to(PT, (50, 2))
    assert np.array_equal(regularized_stress(RegularizedStress(model, 0.0), 0.0, x, xi),
                          evaluate_stress(model, 0.0, x, xi))


def test_quadratic_penalty_adds_two_theta_xi(rng):
    model = power_law(0.3, 0.0, 2.0)
    xi = sym(rng)
    x = np.broadcast_to(PT, (50, 2))
    out = regularized_stress(RegularizedStress(model, 0.05, 2.0), 0.0, x, xi)
    assert np.allclose(out, evaluate_stress(model, 0.0, x, xi) + 0.1 * xi, rtol=1e-14)
    assert not regularized_stress(RegularizedStress(model, 0.05), 0.0, PT, np.zeros((2, 2))).any()


def test_regularization_rejects_bad_parameters():
    model = power_law(1.0, 1.0, 3.0)
    with pytest.raises(ConfigurationError):
        RegularizedStress(model, -1e-3)
    with pytest.raises(ConfigurationError):
        RegularizedStress(model, 1e-3, s_max=2.5)


def test_penalty_difference_is_exactly_the_gradient_of_the_modular(rng):
    model = power_law(0.5, 1.0, 3.0)
    reg = RegularizedStress(model, 0.01, 4.0)
    xi = sym(rng, mags=(1e-2, 1e2))
    x = np.broadcast_to(PT, (50, 2))
    gap = tensor_norm(regularized_stress(reg, 0.0, x, xi) - evaluate_stress(model, 0.0, x, xi))
    assert np.allclose(gap, 0.01 * 4.0 * tensor_norm(xi) ** 3, rtol=1e-12)


def test_young_constant_for_quadratic_case(rng):
    reg = RegularizedStress(power_law(1.0, 0.0, 2.0), 0.1, 2.0)
    assert reg.C_star == pytest.approx(0.25, abs=1e-15)
    assert young_identity_residual(reg, np.zeros((2, 2))) == 0.0
    xi = sym(rng)
    assert np.all(young_identity_residual(reg, xi) <= 1e-12 * (1 + tensor_norm(xi) ** 2))


def test_young_constant_for_quartic_case():
    reg = RegularizedStress(power_law(1.0, 1.0, 4.0), 0.1)
    assert reg.C_star == pytest.approx(3 / (4 * 4 ** (1 / 3)), rel=1e-14)


@pytest.mark.parametrize("s_max", [2.0, 3.0, 4.0, float(Fraction(11, 5))])
def test_young_identity_residual_is_roundoff(s_max, rng):
    reg = RegularizedStress(power_law(1.0, 1.0, 2.0), 0.1, s_max)
    xi = random_symmetric(rng, 2000, 3, (1e-3, 1e3))
    assert np.all(young_identity_residual(reg, xi) <= 1e-12 * (1 + tensor_norm(xi) ** s_max))


@pytest.mark.parametrize("nu0, nu1, s", [(1.0, 1.0, 2.0), (1.0, 1.0, 3.0), (0.0, 1.0, 4.0), (0.05, 0.0, 2.0)])
def test_power_laws_pass_the_structural_checks(nu0, nu1, s):
    rep = verify_assumptions(power_law(nu0, nu1, s), n_samples=5000, theta=1e-3)
    assert rep.passed, rep.to_csv()
    assert rep["T1"].min_residual == 0.0 and rep["R1"].min_residual == 0.0


def test_reversed_law_fails_monotonicity_with_a_witness():
    law = table_law([0.0, 1.0], [-1.0, -1.0], 2.0)
    rep = verify_assumptions(law, n_samples=500)
    t3 = rep["T3"]
    assert not t3.passed and "xi1" in t3.witness and "xi2" in t3.witness
    assert not rep.passed and t3 in rep.failures()
    assert "T3" in rep.to_csv() and "FAIL" in rep.to_csv()


def test_increasing_table_law_passes():
    law = table_law([0.0, 1.0, 10.0], [1.0, 1.0, 5.0], 2.0)
    assert verify_assumptions(law, n_samples=2000, mag_range=(1e-2, 50.0), theta=1e-2).passed


@pytest.mark.parametrize("nodes, vals", [([1.0, 0.5], [1.0, 1.0]), ([0.0], [1.0]), ([0.0, 1.0], [1.0])])
def test_table_validation(nodes, vals):
    with pytest.raises(ConfigurationError):
        table_law(nodes, vals, 2.0)


def test_coercivity_constant_is_stable_under_refinement():
    law = power_law(0.3, 0.3, 3.0)
    coarse = coercivity_constant(law)
    fine = coercivity_constant(law, n_mag=8001, n_exp=33)
    assert np.isfinite(coarse) and coarse >= 1.0
    assert abs(fine - coarse) <= 1e-3 * coarse


def test_zero_theta_reports_no_high_exponent_constant():
    rep = verify_assumptions(power_law(1.0, 1.0, 3.0), n_samples=200, theta=0.0)
    assert rep["R3"].passed and "theta = 0" in rep["R3"].witness


def test_sample_count_must_be_positive():
    with pytest.raises(ConfigurationError):
        verify_assumptions(power_law(1.0, 0.0, 2.0), n_samples=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), theta=st.floats(1e-4, 1.0), s=st.floats(2.0, 5.0),
       s_extra=st.floats(0.0, 2.0))
def test_regularized_law_is_strictly_monotone(seed, theta, s, s_extra):
    rng = np.random.default_rng(seed)
    reg = RegularizedStress(power_law(0.5, 0.5, s), theta, s + s_extra)
    a, b = sym(rng, 200, mags=(1e-2, 1e2)), sym(rng, 200, mags=(1e-2, 1e2))
    x = np.broadcast_to(PT, (200, 2))
    diff = ((regularized_stress(reg, 0.0, x, a) - regularized_stress(reg, 0.0, x, b)) * (a - b)).sum(axis=(1, 2))
    assert np.all(diff > 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(2.0, 5.0), theta=st.floats(0.0, 1.0))
def test_decomposed_coercivity_holds_uniformly_in_theta(seed, s, theta):
    base = power_law(0.3, 0.7, s)
    reg = RegularizedStress(base, theta)
    xi = sym(np.random.default_rng(seed), 300)
    r = tensor_norm(xi)
    phi = base.coefficient(r, s)
    lhs = base.c * reg.coefficient(r, s) * r * r
    rhs = r ** s + (phi * r) ** (s / (s - 1)) + reg.penalty_coefficient(r) * r * r - base.h
    assert np.all(lhs >= rhs - 1e-9 * (1 + np.abs(rhs)))
