import io
import logging
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from vexflow.errors import ConfigurationError, DependencyError, DimensionError, StepFailure
from vexflow.exponent import conjugate_exponent, make_exponent_field, pressure_exponent
from vexflow.grid import build_domain
from vexflow.solver import (SolverConfig, advance, energy_report, face_force, init_state, interpolation_check,
                            interpolation_exponent, local_energy_report, read_checkpoint, simulate,
                            stream_velocity, strain_magnitude, strains, theta_sweep, write_checkpoint)
from vexflow.stress import power_law

from builders import bubble_stream, interior_bump, newtonian_config, powerlaw_config


def small_config(n=16, T=0.1, dt=0.01, nu=1.0, **kw):
    dom = build_domain((1.0, 1.0), n, T=T)
    return SolverConfig(dom, power_law(nu, 0.0, make_exponent_field(dom, [2.0])), 1e-3, dt, **kw)


def test_rest_state_stays_at_rest():
    state = simulate(small_config(store_pressures=True))
    assert all(not r.w.any() for r in state.history)
    assert not energy_report(state).residual.any()
    local = local_energy_report(state, interior_bump())
    assert all(not v.any() for k, v in local.columns.items() if k not in ("step", "t"))


def test_divergent_initial_velocity_is_projected(caplog):
    cfg = small_config()

    def u0(xu, yu, xv, yv):
        return np.sin(np.pi * xu) * np.sin(np.pi * yu), 0 * xv

    with caplog.at_level(logging.WARNING, logger="vexflow"):
        state = init_state(u0, cfg)
    assert state.projection_correction > 0
    assert "projected" in caplog.text
    assert np.abs(cfg.grid.D @ state.u).max() <= 1e-12


def test_stream_function_velocity_is_accepted_unchanged():
    cfg = small_config()
    w = stream_velocity(cfg.grid, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    state = init_state(w, cfg)
    assert state.projection_correction == 0.0
    assert np.array_equal(state.u, w)
    assert state.history[0].kinetic == pytest.approx(0.5 * cfg.grid.h ** 2 * float(w @ w))


def test_initial_velocity_shape_is_checked():
    with pytest.raises(DimensionError):
        init_state(np.zeros(7), small_config())


def test_dt_must_divide_the_horizon():
    with pytest.raises(ConfigurationError):
        small_config(T=0.1, dt=0.03).n_steps
    with pytest.raises(ConfigurationError):
        small_config(dt=0.0)


def test_nonpositive_theta_is_refused_in_a_step():
    cfg = replace(small_config(), theta=0.0)
    with pytest.raises(ConfigurationError, match="sweep"):
        advance(init_state(None, cfg))


def test_newtonian_decay_is_monotone():
    cfg = small_config(u0=stream_velocity(small_config().grid, bubble_stream))
    state = simulate(cfg)
    kin = [r.kinetic for r in state.history]
    assert all(b < a for a, b in zip(kin, kin[1:]))
    for r in state.history[1:]:
        assert np.abs(cfg.grid.D @ r.w).max() <= 1e-10 * np.abs(r.w).max()


def test_nonlinear_residuals_decrease_within_each_step():
    state = simulate(powerlaw_config(n=16, dt=0.05, T=0.5))
    for r in state.history[1:]:
        assert all(b < a for a, b in zip(r.residuals, r.residuals[1:]))
        assert r.iterations >= 1


def test_first_order_self_convergence():
    # coarser steps are still pre-asymptotic (ratios 3.5, 2.9, 2.3 from dt = 0.04 down)
    finals = []
    for dt in (0.005, 0.0025, 0.00125):
        dom = build_domain((1.0, 1.0), 16, T=0.2)
        cfg = SolverConfig(dom, power_law(0.05, 0.0, make_exponent_field(dom, [2.0])), 1e-3, dt,
                           u0=stream_velocity(small_config().grid, bubble_stream))
        finals.append(simulate(cfg).u)
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    assert 1.6 <= ratio <= 2.4


def test_conservative_force_does_no_work():
    grid = small_config().grid
    force = face_force(lambda t, x, y: -np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
                       lambda t, x, y: -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y), grid)
    cfg = small_config(nu=0.05, force=force, u0=stream_velocity(grid, bubble_stream))
    state = simulate(cfg)
    for r in state.history[1:]:
        scale = grid.h ** 2 * np.linalg.norm(r.force) * np.linalg.norm(r.w)
        assert abs(r.work) <= 1e-12 * scale
    assert np.abs(energy_report(state).columns["work"]).max() <= 1e-14


def test_dissipation_dominates_the_coercivity_bound():
    cfg = powerlaw_config(n=16, dt=0.05, T=0.5)
    state = simulate(cfg)
    grid, base = cfg.grid, cfg.model
    for r in state.history[1:]:
        mag = strain_magnitude(grid, *strains(grid, r.w))
        S = base.coefficient(mag, r.s) * mag
        lower = grid.h ** 2 * float((mag ** r.s + S ** (r.s / (r.s - 1)) - base.h).sum()) / base.c
        assert r.dissipation >= lower


def test_local_ledger_is_linear_in_the_cutoff():
    state = simulate(newtonian_config(n=16, dt=0.02, T=0.1, store_pressures=True))
    psi = interior_bump(0.5, 0.5, 0.35)
    one = local_energy_report(state, psi)
    two = local_energy_report(state, lambda x, y: 2 * psi(x, y))
    for k in ("kinetic", "dissipation", "convective", "work", "pressure", "residual"):
        assert np.allclose(two.columns[k], 2 * one.columns[k], rtol=1e-12, atol=1e-300)


def test_local_ledger_needs_pressures():
    state = simulate(newtonian_config(n=16, dt=0.02, T=0.1))
    with pytest.raises(DependencyError):
        local_energy_report(state, interior_bump())
    with pytest.raises(DependencyError):
        local_energy_report(list(state.history), interior_bump())


def test_checkpoint_roundtrip():
    state = simulate(newtonian_config(n=8, dt=0.05, T=0.1))
    buf = io.BytesIO()
    write_checkpoint(buf, state.history, state.theta, state.grid)
    raw = buf.getvalue()
    assert raw[:4] == b"VXFC" and int.from_bytes(raw[4:8], "little") == 1
    back = read_checkpoint(io.BytesIO(raw))
    assert [b["step"] for b in back] == [0, 1, 2]
    for b, r in zip(back, state.history):
        u, v = state.grid.unpack(r.w)
        assert b["t"] == r.t and b["theta"] == state.theta
        assert np.array_equal(b["u"], u) and np.array_equal(b["v"], v)
    with pytest.raises(DimensionError):
        read_checkpoint(io.BytesIO(raw[:-3]))
    with pytest.raises(ConfigurationError):
        read_checkpoint(io.BytesIO(b"XXXX" + raw[4:]))


def test_interpolation_exponents():
    assert interpolation_exponent(2, 2) == 4
    assert interpolation_exponent(2, 3) == pytest.approx(10 / 3, rel=1e-15)


def test_exponent_arithmetic_identities():
    for d, s_min in ((Fraction(2), Fraction(2)), (Fraction(3), Fraction(11, 5))):
        s0 = pressure_exponent(d)
        assert conjugate_exponent(s0 / 2) == s_min
        assert s_min * (1 + 2 / d) == s0 > 3
    assert pressure_exponent(Fraction(3)) == Fraction(11, 3)


def test_lifted_exponents_exceed_three():
    cfg = powerlaw_config(n=16)
    cov, _ = cfg.localization
    assert np.all(cov.lifted >= pressure_exponent(2)) and np.all(cov.lifted > 3)


def test_interpolation_constant_is_stable_under_refinement():
    consts = [interpolation_check(simulate(newtonian_config(n=n, dt=0.02, T=0.2))).constant for n in (16, 32)]
    assert all(c > 0 for c in consts)
    assert abs(consts[1] - consts[0]) <= 0.2 * consts[1]
    with pytest.raises(ConfigurationError):
        interpolation_check(simulate(newtonian_config(n=8, dt=0.05, T=0.1)), q=1.5)


def test_single_theta_sweep_skips_trends():
    sweep = theta_sweep(newtonian_config(n=8, dt=0.05, T=0.1), [0.01])
    assert "single theta: trend checks skipped" in sweep.notes
    assert sweep.passed
    assert "B13 (surrogate)" in sweep.to_csv().splitlines()[0]


def test_theta_list_validation():
    cfg = newtonian_config(n=8, dt=0.05, T=0.1)
    with pytest.raises(ConfigurationError):
        theta_sweep(cfg, [0.01, 0.1])
    with pytest.raises(ConfigurationError):
        theta_sweep(cfg, [0.1, 0.0])


def test_step_failure_reports_history_and_advice():
    cfg = replace(powerlaw_config(n=8, dt=0.05, T=0.1), max_iter=0)
    with pytest.raises(StepFailure, match="halving dt") as err:
        simulate(cfg)
    assert len(err.value.history) == 1


def test_failed_runs_are_recorded_and_the_sweep_continues():
    cfg = replace(powerlaw_config(n=8, dt=0.05, T=0.1), max_iter=0)
    sweep = theta_sweep(cfg, [0.1, 0.01])
    assert sweep.flags["runs"] == "FAIL" and not sweep.passed
    assert all(r.error and "halving dt" in r.error for r in sweep.runs)
