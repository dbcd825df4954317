import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vexflow.errors import ConfigurationError, ContractError, SupportLeakError, UnderResolvedKernelError
from vexflow.exponent import make_exponent_field
from vexflow.grid import build_domain
from vexflow.mollifier import (convergence_ladder, double_average_distance, infimum_comparability,
                               linf_bound_constant, localized_double_smooth, make_kernel, minimizer_independence,
                               spatial_mollify, support_margin, symmetric_gradient, temporal_mollify,
                               weighted_l2_gap)

from builders import interior_bump

DOM = build_domain((1.0, 1.0), 64)


@pytest.mark.parametrize("eps", [2 / 64, 0.05, 0.1, 0.3])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_kernel_has_unit_mass(eps, d):
    k = make_kernel(eps, 1 / 64, d)
    assert abs(k.mass - 1.0) <= 1e-12
    assert k.weights.min() >= 0


def test_kernel_below_two_cells_is_rejected():
    with pytest.raises(UnderResolvedKernelError):
        make_kernel(1.5 / 64, 1 / 64, 2)
    with pytest.raises(UnderResolvedKernelError, match="time step"):
        temporal_mollify(np.zeros(10), 0.01, 0.01)


def test_constant_field_is_fixed_in_periodic_mode():
    u = np.full(DOM.shape, 3.7)
    assert np.allclose(spatial_mollify(u, 0.1, DOM, periodic=True), 3.7, rtol=0, atol=1e-13)


def test_affine_field_is_reproduced_away_from_the_boundary():
    X, Y = DOM.mesh()
    u = 2.0 + 3.0 * X - 1.5 * Y
    out = spatial_mollify(u, 0.1, DOM)
    inner = (DOM.boundary_distance > 0.1 + DOM.h)
    assert np.abs(out - u)[inner].max() <= 1e-12


def test_half_plane_indicator_takes_one_half_on_the_interface():
    X, _ = DOM.mesh()
    xc = X[32, 0]
    u = (X > xc) + 0.5 * (X == xc)
    out = spatial_mollify(u, 0.1, DOM, periodic=True)
    assert np.allclose(out[32], 0.5, atol=1e-14)
    row = out[:, 10]
    # monotone transition confined to a band of width 2 eps
    assert np.all(np.diff(row[20:45]) >= -1e-15)
    far = np.abs(X[:, 0] - xc) >= 0.1
    band = (np.abs(X[:, 0] - xc) < 0.3)
    assert np.allclose(row[far & band], (X[:, 0] > xc)[far & band], atol=1e-14)


def test_mollification_is_linear_and_contracts_l1(rng):
    a, b = rng.standard_normal((2,) + DOM.shape)
    m = lambda f: spatial_mollify(f, 0.08, DOM)
    assert np.allclose(m(2 * a - 3 * b), 2 * m(a) - 3 * m(b), atol=1e-12)
    assert np.abs(m(a)).sum() <= np.abs(a).sum()


def test_constant_in_time_is_unchanged():
    u = np.ones((40, 4, 4)) * 5.0
    assert np.allclose(temporal_mollify(u, 0.1, 0.01, extension="edge"), 5.0, atol=1e-13)


def test_time_jump_midpoint_is_the_average():
    t = np.arange(101) * 0.01
    u = np.where(t < 0.5, 1.0, 3.0)
    u[50] = 2.0
    out = temporal_mollify(u, 0.1, 0.01, extension="edge")
    assert out[50] == pytest.approx(2.0, abs=1e-13)
    assert np.allclose(out[:40], 1.0) and np.allclose(out[61:], 3.0)


def test_energy_extension_holds_initial_value_before_start():
    u = np.zeros((30, 2))
    out = temporal_mollify(u, 0.05, 0.01, extension="energy", u0=np.ones(2))
    assert out[0, 0] > 0.4 and out[-1, 0] == 0.0
    with pytest.raises(ConfigurationError):
        temporal_mollify(u, 0.05, 0.01, extension="mirror")


def test_space_and_time_mollification_commute(rng):
    dom = build_domain((1.0, 1.0), 24)
    u = rng.standard_normal((30,) + dom.shape + (2,))
    a = spatial_mollify(temporal_mollify(u, 0.05, 0.01), 0.1, dom, leading=1)
    b = temporal_mollify(spatial_mollify(u, 0.1, dom, leading=1), 0.05, 0.01)
    assert np.abs(a - b).max() <= 1e-12


def test_support_margin_and_leak():
    psi = interior_bump(0.5, 0.5, 0.3)(*DOM.mesh())
    eps0 = support_margin(psi, DOM)
    assert 0.08 < eps0 < 0.11
    u = np.ones(DOM.shape + (2,))
    with pytest.raises(SupportLeakError):
        localized_double_smooth(u, psi, eps0 + 1e-6, DOM)
    assert support_margin(np.ones(DOM.shape), DOM) < DOM.h


def test_zero_velocity_stays_zero():
    psi = interior_bump(0.5, 0.5, 0.3)(*DOM.mesh())
    assert not localized_double_smooth(np.zeros(DOM.shape + (2,)), psi, 0.05, DOM).any()


def test_unit_cutoff_on_core_reduces_to_double_mollification():
    X, Y = DOM.mesh()
    r = np.hypot(X - 0.5, Y - 0.5)
    psi = np.clip((0.4 - r) / 0.1, 0.0, 1.0)
    u = np.where(r < 0.15, (0.15 - r) ** 2, 0.0)[..., None] * np.array([1.0, -2.0])
    eps = 0.035
    out = localized_double_smooth(u, psi, eps, DOM)
    twice = spatial_mollify(spatial_mollify(u, eps, DOM), eps, DOM)
    core = r < 0.25
    assert np.abs(out - twice)[core].max() <= 1e-14


def test_gradient_sup_respects_the_linf_constant(rng):
    psi = interior_bump(0.5, 0.5, 0.3)(*DOM.mesh())
    u = rng.standard_normal(DOM.shape + (2,))
    for eps in (0.08, 0.06, 0.04):
        v = localized_double_smooth(u, psi, eps, DOM)
        sup = np.sqrt((symmetric_gradient(v, DOM) ** 2).sum(axis=(-1, -2))).max()
        assert sup * eps ** 3 <= linf_bound_constant(u, psi, eps, DOM)


def smooth_velocity(dom):
    X, Y = dom.mesh()
    b = (np.sin(np.pi * X) * np.sin(np.pi * Y)) ** 2
    return np.stack([b * np.cos(2 * np.pi * Y), -b * np.sin(np.pi * X)], -1)


def test_ladder_distances_shrink_at_second_order():
    dom = build_domain((1.0, 1.0), 128)
    s = make_exponent_field(dom, [2.0])
    psi = interior_bump(0.5, 0.5, 0.3)(*dom.mesh())
    lad = convergence_ladder(smooth_velocity(dom)[None], psi, [0.08, 0.04, 0.02], s)
    assert lad.passed
    orders = np.log2(np.array(lad.l1_distances[:-1]) / np.array(lad.l1_distances[1:]))
    assert np.all(orders > 1.7)
    assert "eps,l1_distance,modular_distance,linf_times_eps_pow" in lad.to_csv(2)


def test_ladder_of_zero_field_is_zero():
    dom = build_domain((1.0, 1.0), 32)
    s = make_exponent_field(dom, [2.0])
    psi = interior_bump(0.5, 0.5, 0.3)(*dom.mesh())
    lad = convergence_ladder(np.zeros((1,) + dom.shape + (2,)), psi, [0.08, 0.07], s)
    assert lad.l1_distances == (0.0, 0.0) and lad.modular_distances == (0.0, 0.0)


def test_ladder_with_mixed_exponent_is_monotone():
    dom = build_domain((1.0, 1.0), 128, slabs=[0.0, 0.5, 1.0])
    X, _ = dom.mesh()
    s = make_exponent_field(dom, [2.0 + 0.0 * X, 2.5 + X])
    u = smooth_velocity(dom)
    psi = interior_bump(0.5, 0.5, 0.35)(*dom.mesh())
    lad = convergence_ladder(np.stack([u, 0.5 * u]), psi, [0.064, 0.032, 0.016], s)
    assert all(b < a for a, b in zip(lad.modular_distances, lad.modular_distances[1:]))


def test_ladder_rejects_nonzero_trace_and_bad_ordering():
    dom = build_domain((1.0, 1.0), 32)
    s = make_exponent_field(dom, [2.0])
    psi = interior_bump(0.5, 0.5, 0.3)(*dom.mesh())
    with pytest.raises(ContractError):
        convergence_ladder(np.ones((1,) + dom.shape + (2,)), psi, [0.08], s)
    with pytest.raises(ConfigurationError):
        convergence_ladder(np.zeros((1,) + dom.shape + (2,)), psi, [0.04, 0.08], s)


def test_minimizer_does_not_depend_on_magnitude():
    dom = build_domain((1.0, 1.0), 32, slabs=[0.0, 0.5, 1.0])
    X, Y = dom.mesh()
    s = make_exponent_field(dom, [2.0 + X * Y, 3.0 + np.sin(3 * X) * np.cos(2 * Y)])
    centers = [(0.2, 0.3), (0.5, 0.5), (0.8, 0.1)]
    assert minimizer_independence(s, centers, 0.2, [1.0, 1.5, 10.0, 1e4]) <= 1e-14


COMPARABILITY_CASES = [
    lambda X, Y: 2.3 + 0.5 * X + 0.3 * np.sin(2 * np.pi * Y),
    lambda X, Y: 2.0 + 2.0 * X * Y,
    lambda X, Y: 2.0 + np.abs(X - 0.5),
]


@pytest.mark.parametrize("case", COMPARABILITY_CASES)
def test_infimum_comparability_on_small_balls(case):
    dom = build_domain((1.0, 1.0), 64)
    s = make_exponent_field(dom, [case(*dom.mesh())])
    ratios = infimum_comparability(s, [0.025, 0.05, 0.1], E=5.0)
    assert 0 < max(ratios.values()) <= 1.0


@pytest.mark.parametrize("case", COMPARABILITY_CASES)
def test_infimum_comparability_with_diameter_factor(case):
    # balls of radius gamma contain pairs 2 gamma apart, which costs one more e^(C (d+1))
    dom = build_domain((1.0, 1.0), 64)
    s = make_exponent_field(dom, [case(*dom.mesh())])
    ratios = infimum_comparability(s, [0.15, 0.2, 0.3, 0.45], E=5.0)
    assert max(ratios.values()) <= np.exp(3 * s.log_holder_C)


def test_weighted_l2_and_double_average_converge(rng):
    dom = build_domain((1.0, 1.0), 128)
    f = smooth_velocity(dom)
    psi = interior_bump(0.5, 0.5, 0.3)(*dom.mesh())
    gaps = [weighted_l2_gap(f, psi, e, dom) for e in (0.1, 0.05, 0.025)]
    dists = [double_average_distance(f, e, dom) for e in (0.1, 0.05, 0.025)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.1 * gaps[0]
    assert dists[0] > dists[1] > dists[2] and dists[2] < 0.1 * dists[0]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(2 / 32, 0.3))
def test_young_bound_property(seed, eps):
    dom = build_domain((1.0, 1.0), 32)
    u = np.random.default_rng(seed).standard_normal(dom.shape + (2,))
    assert np.abs(spatial_mollify(u, eps, dom)).sum() <= np.abs(u).sum() * (1 + 1e-12)
