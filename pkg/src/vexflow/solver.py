"""Time stepping for the regularized flow problem on a 2-D no-slip box.

Each step solves

    (w - w_n) / dt + C(w_n) + A(w) - f(t_{n+1}) + G pi = 0,    D w = 0,

where ``C`` is the staggered convection of the previous velocity, ``A`` the
discrete divergence of the regularized stress (the gradient of a convex
potential, hence monotone), ``G``/``D`` the staggered gradient/divergence.
The monotone system is solved by a damped Newton iteration on the saddle
point system.  Energy and pressure diagnostics are built from the same
discrete operators, so the ledgers close up to time-discretization defects.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, DependencyError, DimensionError, StepFailure, VexflowError
from .exponent import ExponentField, TimeSamples, luxemburg_norm, make_exponent_field, pressure_exponent
from .grid import build_covering, partition_of_unity
from .mac import mac_grid
from .pressure import PressureBundle, SymTensor, harmonic_pressure, interior_laplacian, pressure_bundle
from .stress import RegularizedStress, StressModel

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- operators


def strains(grid, w):
    """(du/dx, dv/dy) at cells and the half shear rate at nodes."""
    return grid.Bx @ w, grid.By @ w, grid.Bxy @ w


def strain_magnitude(grid, d11, d22, d12):
    """Cell Frobenius norm of the strain, shear squared and averaged from the nodes."""
    return np.sqrt(d11 * d11 + d22 * d22 + 2.0 * (grid.Nc @ (d12 * d12)))


def viscous_operator(grid, w, phi):
    """A(w) on free faces for a cell coefficient ``phi``."""
    d11, d22, d12 = strains(grid, w)
    return grid.Bx.T @ (phi * d11) + grid.By.T @ (phi * d22) + 2.0 * (grid.Bxy.T @ ((grid.Nc.T @ phi) * d12))


def stress_tensor(grid, w, phi):
    """Staggered stress whose discrete divergence is ``-A(w)``.

    Diagonal entries sit at cells and the shear entry at nodes, where the
    coefficient is the mean over the cells of the box touching the node.
    """
    d11, d22, d12 = strains(grid, w)
    shear = (grid.Nc.T @ phi) / grid.node_weight * d12
    nx, ny = grid.nx, grid.ny
    comps = {
        (0, 0): (phi * d11).reshape(nx, ny),
        (1, 1): (phi * d22).reshape(nx, ny),
        (0, 1): shear.reshape(nx + 1, ny + 1),
    }
    return SymTensor(comps, "mac", (nx, ny))


def cell_strain_tensor(grid, w):
    """Strain tensor at cells ``(nx, ny, 2, 2)`` with the shear averaged from the nodes."""
    d11, d22, d12 = strains(grid, w)
    s12 = grid.Nc @ d12
    out = np.empty((grid.nx, grid.ny, 2, 2))
    out[..., 0, 0] = d11.reshape(grid.nx, grid.ny)
    out[..., 1, 1] = d22.reshape(grid.nx, grid.ny)
    out[..., 0, 1] = out[..., 1, 0] = s12.reshape(grid.nx, grid.ny)
    return out


def velocity_gradient_magnitude(grid, w):
    """|grad u| at cells, off-diagonal entries squared at nodes and averaged."""
    u, v = grid.unpack(w)
    h = grid.h
    ux = (u[1:] - u[:-1]) / h
    vy = (v[:, 1:] - v[:, :-1]) / h
    ug = np.concatenate([-u[:, :1], u, -u[:, -1:]], axis=1)
    vg = np.concatenate([-v[:1], v, -v[-1:]], axis=0)
    uy = (ug[:, 1:] - ug[:, :-1]) / h
    vx = (vg[1:] - vg[:-1]) / h
    off = (grid.Nc @ (uy * uy + vx * vx).ravel()).reshape(grid.nx, grid.ny)
    return np.sqrt(ux * ux + vy * vy + off)


def _jacobian(grid, w, phi, kappa):
    d11, d22, d12 = strains(grid, w)
    Bx, By, Bxy, Nc = grid.Bx, grid.By, grid.Bxy, grid.Nc
    dg = sparse.diags
    H = Bx.T @ dg(phi) @ Bx + By.T @ dg(phi) @ By + 2.0 * (Bxy.T @ dg(Nc.T @ phi) @ Bxy)
    if np.any(kappa):
        E = dg(d11) @ Bx + dg(d22) @ By + 2.0 * (Nc @ dg(d12) @ Bxy)
        H = H + E.T @ dg(kappa) @ E
    return H


# -------------------------------------------------------------- configuration


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Static data of a run.

    ``force`` maps a time to a free-face vector (``None`` for no forcing);
    ``u0`` is the default initial velocity (see :func:`init_state`).
    """

    domain: object
    model: StressModel
    theta: float
    dt: float
    force: object = None
    u0: object = None
    store_pressures: bool = False
    tol: float = 1e-10
    max_iter: int = 500
    projection_tol: float = 1e-10

    def __post_init__(self):
        if self.domain.d != 2 or not self.domain.is_box:
            raise DimensionError("the time stepper supports the full 2-D box only")
        hx = self.domain.extents[0] / self.domain.shape[0]
        hy = self.domain.extents[1] / self.domain.shape[1]
        if not np.isclose(hx, hy, rtol=1e-12):
            raise ConfigurationError("the time stepper needs square cells")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    @cached_property
    def grid(self):
        nx, ny = self.domain.shape
        return mac_grid(nx, ny, float(self.domain.h))

    @cached_property
    def exponent(self):
        if isinstance(self.model.s, ExponentField):
            return self.model.s
        return make_exponent_field(self.domain, [float(self.model.s)] * self.domain.n_slabs)

    @cached_property
    def regularized(self):
        return RegularizedStress(self.model, self.theta, self.exponent.s_max)

    @property
    def n_steps(self):
        n = self.domain.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigurationError(f"dt={self.dt} does not divide T={self.domain.T}")
        return int(round(n))

    def force_at(self, t):
        if self.force is None:
            return np.zeros(self.grid.n_free)
        f = np.asarray(self.force(t), dtype=float)
        if f.shape != (self.grid.n_free,):
            raise DimensionError(f"force has shape {f.shape}, expected ({self.grid.n_free},)")
        return f

    def exponent_cells(self, t):
        return np.asarray(self.exponent.at_time(t), dtype=float).ravel()

    @cached_property
    def localization(self):
        """Partition weights at cells ``(N, nx, ny)`` and nodes ``(N, nx + 1, ny + 1)``."""
        cov = partition_of_unity(build_covering(self.domain, self.exponent), self.domain)
        g = self.grid
        zc = cov.zeta.reshape(cov.n_balls, -1)
        zn = (g.Nc.T @ zc.T).T / g.node_weight
        return cov, (cov.zeta, {(0, 1): zn.reshape(cov.n_balls, g.nx + 1, g.ny + 1)})


def face_force(fx, fy, grid, origin=(0.0, 0.0)):
    """Force callable from component functions ``f(t, x, y)`` sampled on the free faces."""
    (xu, yu), (xv, yv) = grid.face_coordinates(origin)

    def force(t):
        u = np.broadcast_to(fx(t, xu, yu), xu.shape)
        v = np.broadcast_to(fy(t, xv, yv), xv.shape)
        return grid.pack(u, v)

    return force


def stream_velocity(grid, stream, origin=(0.0, 0.0)):
    """Free-face velocity (d psi/dy, -d psi/dx) from a stream function sampled at nodes.

    The result is exactly divergence-free; the stream function should be
    constant on the walls so that no normal flux is dropped.
    """
    X, Y = grid.node_coordinates(origin)
    psi = np.broadcast_to(stream(X, Y), X.shape).astype(float)
    u = (psi[:, 1:] - psi[:, :-1]) / grid.h
    v = -(psi[1:, :] - psi[:-1, :]) / grid.h
    return grid.pack(u, v)


# --------------------------------------------------------------------- state


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Immutable per-step snapshot; rates are spatial integrals at the step's end time."""

    step: int
    t: float
    w: np.ndarray
    pi: np.ndarray = None
    phi: np.ndarray = None
    s: np.ndarray = None
    force: np.ndarray = None
    convection: np.ndarray = None
    kinetic: float = 0.0
    dissipation: float = 0.0
    work: float = 0.0
    convective: float = 0.0
    increment: float = 0.0
    iterations: int = 0
    residuals: tuple = ()
    pressures: PressureBundle = None
    harmonic: dict = None


@dataclass(frozen=True, eq=False)
class SolverState:
    t: float
    u: np.ndarray
    theta: float
    dt: float
    model: RegularizedStress
    f: object
    history: tuple
    config: SolverConfig
    pi: np.ndarray = None
    projection_correction: float = 0.0
    cache: dict = field(default_factory=dict, repr=False)
    pressure_sum: np.ndarray = None

    @property
    def step(self):
        return self.history[-1].step

    @property
    def grid(self):
        return self.config.grid


def _divergence_scale(grid, w):
    d11, d22, d12 = strains(grid, w)
    return max(np.abs(d11).max(initial=0.0), np.abs(d22).max(initial=0.0), np.abs(d12).max(initial=0.0))


def _initial_faces(u0, config):
    grid = config.grid
    origin = config.domain.origin
    if u0 is None:
        return np.zeros(grid.n_free)
    if callable(u0):
        (xu, yu), (xv, yv) = grid.face_coordinates(origin)
        u, v = u0(xu, yu, xv, yv)
        u = np.broadcast_to(u, xu.shape).astype(float)
        v = np.broadcast_to(v, xv.shape).astype(float)
        return _wall_checked(grid, u, v)
    if isinstance(u0, tuple) and len(u0) == 2:
        u, v = (np.asarray(a, dtype=float) for a in u0)
        if u.shape != (grid.nx + 1, grid.ny) or v.shape != (grid.nx, grid.ny + 1):
            raise DimensionError(f"face arrays {u.shape}, {v.shape} do not match the {grid.nx}x{grid.ny} grid")
        return _wall_checked(grid, u, v)
    w = np.asarray(u0, dtype=float)
    if w.shape != (grid.n_free,):
        raise DimensionError(f"initial velocity has shape {w.shape}, expected ({grid.n_free},)")
    return w.copy()


def _wall_checked(grid, u, v):
    wall = max(np.abs(u[[0, -1]]).max(), np.abs(v[:, [0, -1]]).max())
    if wall > 0:
        log.warning("initial velocity has normal wall flux %.3e; wall faces are set to zero", wall)
    return grid.pack(u, v)


def init_state(u0, config):
    """State at t = 0 from ``u0``.

    ``u0`` may be ``None`` (rest), a free-face vector, a pair of full face
    arrays, or a callable ``(xu, yu, xv, yv) -> (u, v)`` sampled on the
    faces.  A velocity whose discrete divergence exceeds the projection
    tolerance is projected, and the size of the correction is logged.
    """
    grid = config.grid
    w = _initial_faces(u0 if u0 is not None else config.u0, config)
    div = np.abs(grid.D @ w).max(initial=0.0)
    correction = 0.0
    if div > config.projection_tol * max(_divergence_scale(grid, w), 1e-300):
        p = grid.solve_neumann(grid.D @ w)
        new = w - grid.G @ p
        correction = float(np.sqrt(grid.h ** 2 * ((new - w) ** 2).sum()))
        log.warning("initial velocity projected to divergence-free; correction L2 norm %.3e", correction)
        w = new
    w.setflags(write=False)
    rec = StepRecord(0, 0.0, w, kinetic=0.5 * grid.h ** 2 * float(w @ w))
    return SolverState(
        t=0.0, u=w, theta=config.theta, dt=config.dt, model=config.regularized, f=config.force_at,
        history=(rec,), config=config, pi=np.zeros(grid.n_cells), projection_correction=correction,
        cache={}, pressure_sum=np.zeros(grid.n_free) if config.store_pressures else None,
    )


# --------------------------------------------------------------------- step


def _factor(grid, H, dt):
    n = grid.n_free
    Dp = grid.D[:-1]
    K = sparse.bmat([[sparse.identity(n) / dt + H, Dp.T], [Dp, None]], format="csc")
    return splu(K)


def _newton_solve(state, w_old, rhs_fixed, s_cells):
    """Solve (w - w_old)/dt + A(w) + G pi = rhs_fixed with D w = 0; returns (w, pi, history)."""
    cfg = state.config
    grid, reg, dt = cfg.grid, state.model, state.dt
    n = grid.n_free

    def coeffs(w):
        d11, d22, d12 = strains(grid, w)
        r = strain_magnitude(grid, d11, d22, d12)
        return reg.coefficient(r, s_cells), reg.coefficient_slope(r, s_cells)

    def residual(w, pi, phi):
        return (w - w_old) / dt + viscous_operator(grid, w, phi) - rhs_fixed + grid.G @ pi

    scale = np.linalg.norm(w_old / dt) + np.linalg.norm(rhs_fixed) + 1e-300
    w, pi = w_old.copy(), state.pi.copy()
    phi, kappa = coeffs(w)
    res = residual(w, pi, phi)
    rnorm = np.linalg.norm(res)
    history = [rnorm]

    cached = state.cache.get("lu")
    if cached is not None and not np.any(kappa) and not np.any(cached[1]) and np.array_equal(cached[0], phi):
        lu, fresh = cached[2], True
    else:
        lu, fresh = _factor(grid, _jacobian(grid, w, phi, kappa), dt), True
        state.cache["lu"] = (phi, kappa, lu)

    it = 0
    while rnorm > cfg.tol * scale:
        if it >= cfg.max_iter:
            raise StepFailure(f"nonlinear solve not converged in {cfg.max_iter} iterations", history)
        rhs = np.concatenate([-(res - grid.G @ pi), -(grid.D[:-1] @ w)])
        sol = lu.solve(rhs)
        dw = sol[:n]
        pi_new = np.append(-sol[n:], 0.0)
        omega = 1.0
        while True:
            w_try = w + omega * dw
            pi_try = pi + omega * (pi_new - pi)
            phi_try, kappa_try = coeffs(w_try)
            res_try = residual(w_try, pi_try, phi_try)
            rn_try = np.linalg.norm(res_try)
            if rn_try < rnorm:
                break
            omega *= 0.5
            if omega < 2.0 ** -30:
                break
        if omega < 2.0 ** -30:
            if not fresh:
                lu, fresh = _factor(grid, _jacobian(grid, w, phi, kappa), dt), True
                continue
            raise StepFailure("damped iteration stalled: no decrease of the residual", history)
        ratio = rn_try / rnorm
        w, pi, phi, kappa, res, rnorm = w_try, pi_try, phi_try, kappa_try, res_try, rn_try
        history.append(rnorm)
        it += 1
        if ratio >= 0.25 and rnorm > cfg.tol * scale:
            lu, fresh = _factor(grid, _jacobian(grid, w, phi, kappa), dt), True
        else:
            fresh = False
    if not np.any(kappa):
        state.cache["lu"] = (phi, kappa, lu)
    return w, pi - pi.mean(), phi, history


def advance(state):
    """One step: implicit regularized stress, explicit convection, exact projection."""
    cfg = state.config
    if not state.theta > 0:
        raise ConfigurationError("theta must be positive in a time step; approach theta = 0 through a sweep")
    grid, dt, h = cfg.grid, state.dt, cfg.grid.h
    w_old = state.u
    t_new = state.t + dt
    s_cells = cfg.exponent_cells(state.t + 0.5 * dt)
    conv = grid.convection(w_old)
    f = cfg.force_at(t_new)
    w, pi, phi, history = _newton_solve(state, w_old, f - conv, s_cells)

    div = np.abs(grid.D @ w).max(initial=0.0)
    if div > 1e-10 * max(_divergence_scale(grid, w), 1e-300) and div > 1e-300:
        raise StepFailure(f"divergence {div:.3e} after step exceeds tolerance", history)
    w.setflags(write=False)
    A = viscous_operator(grid, w, phi)
    rec = dict(
        step=state.step + 1, t=t_new, w=w, pi=pi, phi=phi, s=s_cells, force=f, convection=conv,
        kinetic=0.5 * h * h * float(w @ w), dissipation=h * h * float(A @ w), work=h * h * float(f @ w),
        convective=h * h * float(conv @ w), increment=0.5 * h * h * float((w - w_old) @ (w - w_old)), iterations=len(history) - 1, residuals=tuple(history),
    )
    pressure_sum = state.pressure_sum
    if cfg.store_pressures:
        bundle = step_pressures(cfg, w, w_old, phi, s_cells, f)
        P = bundle.total.ravel()
        pressure_sum = pressure_sum + dt * (conv + A - f - grid.G @ P)
        w0 = state.history[0].w
        hp = harmonic_pressure(-((w - w0) + pressure_sum), grid)
        lap = interior_laplacian(hp.values, h)
        peak = np.abs(hp.values).max(initial=0.0)
        scaled = float(np.abs(lap).max(initial=0.0) * h * h / peak) if peak > 0 else 0.0
        rec["pressures"] = bundle.with_harmonic(hp.values)
        rec["harmonic"] = {"mean": hp.mean, "misfit": hp.misfit, "scaled_laplacian": scaled}
    return replace(
        state, t=t_new, u=w, pi=pi, history=state.history + (StepRecord(**rec),), pressure_sum=pressure_sum,
    )


def step_pressures(cfg, w_new, w_old, phi, s_cells, f):
    """Localized free-space pressures for a step (base stress, penalty, lagged convection, force)."""
    grid = cfg.grid
    d11, d22, d12 = strains(grid, w_new)
    r = strain_magnitude(grid, d11, d22, d12)
    phi_pen = cfg.regularized.penalty_coefficient(r)
    alpha = stress_tensor(grid, w_new, phi - phi_pen)
    theta_beta = stress_tensor(grid, w_new, phi_pen)
    t11, t22, t12 = grid.convective_flux(w_old)
    uu = SymTensor({(0, 0): t11, (1, 1): t22, (0, 1): t12}, "mac", (grid.nx, grid.ny))
    _, weights = cfg.localization
    return pressure_bundle(alpha, theta_beta, uu, grid.unpack(f), None, grid.h, weights=weights, f_layout="mac",
                           method="lattice")


def simulate(config, u0=None, n_steps=None):
    """Run ``n_steps`` steps (default: up to the domain's final time)."""
    state = init_state(u0, config)
    for _ in range(config.n_steps if n_steps is None else n_steps):
        state = advance(state)
    return state


# ------------------------------------------------------------------ ledgers


def _records(trajectory):
    recs = trajectory.history if isinstance(trajectory, SolverState) else tuple(trajectory)
    if not recs or recs[0].step != 0:
        raise DependencyError("trajectory must start with the initial record")
    return recs


@dataclass(frozen=True, eq=False)
class EnergyLedger:
    """Per-step columns of an energy identity; ``residual`` is LHS - RHS."""

    kind: str
    columns: dict

    @property
    def residual(self):
        return self.columns["residual"]

    @property
    def final_residual(self):
        return float(abs(self.residual[-1]))

    @property
    def largest_column(self):
        return max(float(np.abs(v).max()) for k, v in self.columns.items() if k not in ("step", "t", "residual"))

    def to_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        names = list(self.columns)
        wr.writerow(names)
        for i in range(len(self.columns["t"])):
            wr.writerow([_fmt(self.columns[k][i]) for k in names])
        return out.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def energy_report(trajectory):
    """Global ledger: kinetic(t) - kinetic(0) + dissipation - work = residual.

    ``convective`` and ``increments`` are the two time-discretization
    defects; the residual equals minus their sum.
    """
    recs = _records(trajectory)
    dt = np.diff([r.t for r in recs], prepend=0.0)

    def cumulative(name):
        return np.cumsum(dt * np.array([getattr(r, name) for r in recs]))

    kin = np.array([r.kinetic for r in recs])
    diss, work, conv = cumulative("dissipation"), cumulative("work"), cumulative("convective")
    inc = np.cumsum([r.increment for r in recs])
    residual = kin - kin[0] + diss - work
    cols = {
        "step": np.array([r.step for r in recs]), "t": np.array([r.t for r in recs]), "kinetic": kin,
        "dissipation": diss, "work": work, "convective": conv, "increments": inc, "residual": residual,
    }
    return EnergyLedger("global", cols)


def local_energy_report(trajectory, psi, pressures=None):
    """Cutoff-weighted ledger with the harmonic pressure and the pressure transport.

    ``psi`` is a callable ``psi(x, y)`` evaluated on the faces.  ``pressures``
    is the per-step sequence of :class:`PressureBundle` (with the harmonic
    part attached); by default it is taken from the trajectory records.
    With ``v = u + grad p_h``::

        K_psi(t) + int (S : D(psi v)) = K_psi(0) + int (u x u : grad(psi v))
                                        + int f . psi v + int P-transport + residual
    """
    recs = _records(trajectory)
    if not isinstance(trajectory, SolverState):
        raise DependencyError("the local ledger needs a solver state (for the grid and operators)")
    cfg = trajectory.config
    grid, h2 = cfg.grid, cfg.grid.h ** 2
    if pressures is None:
        pressures = [r.pressures for r in recs[1:]]
    pressures = list(pressures)
    if len(pressures) != len(recs) - 1 or any(p is None or p.ph is None for p in pressures):
        raise DependencyError("local ledger needs a pressure bundle with harmonic part for every step")
    (xu, yu), (xv, yv) = grid.face_coordinates(cfg.domain.origin)
    weight = grid.pack(np.broadcast_to(psi(xu, yu), xu.shape), np.broadcast_to(psi(xv, yv), xv.shape))

    n = len(recs)
    cols = {k: np.zeros(n) for k in ("kinetic", "dissipation", "convective", "work", "pressure", "residual")}
    cols["step"] = np.array([r.step for r in recs])
    cols["t"] = np.array([r.t for r in recs])
    w0 = recs[0].w
    cols["kinetic"][0] = 0.5 * h2 * float((weight * w0) @ w0)
    for k in range(1, n):
        r, b = recs[k], pressures[k - 1]
        dt = r.t - recs[k - 1].t
        v = r.w + grid.G @ b.ph.ravel()
        pv = weight * v
        cols["kinetic"][k] = 0.5 * h2 * float(pv @ v)
        cols["dissipation"][k] = cols["dissipation"][k - 1] + dt * h2 * float(viscous_operator(grid, r.w, r.phi) @ pv)
        cols["convective"][k] = cols["convective"][k - 1] - dt * h2 * float(r.convection @ pv)
        cols["work"][k] = cols["work"][k - 1] + dt * h2 * float(r.force @ pv)
        cols["pressure"][k] = cols["pressure"][k - 1] + dt * h2 * float((grid.G @ b.total.ravel()) @ pv)
    lhs = cols["kinetic"] + cols["dissipation"]
    rhs = cols["kinetic"][0] + cols["convective"] + cols["work"] + cols["pressure"]
    cols["residual"] = lhs - rhs
    order = ["step", "t", "kinetic", "dissipation", "convective", "work", "pressure", "residual"]
    return EnergyLedger("local", {k: cols[k] for k in order})


# --------------------------------------------------------------- theta sweep


MONITORED = [
    ("B1", "sup_t |u|_2^2"),
    ("B2", "modular of Du in L^s"),
    ("B3", "norm of u in L^s_min W^1,s_min"),
    ("B4", "norm of u in L^s0"),
    ("B5", "modular of S(Du) in L^s'"),
    ("B6", "theta modular of Du in L^s_max"),
    ("B7", "theta^(1-s'_max) modular of theta grad m"),
    ("B8", "sum of p1 norms in L^s'_max"),
    ("B9", "sum of p2 norms in L^(s0/2)"),
    ("B10", "theta^(-1/s_max) norm of p4 in L^s'_max"),
    ("B11", "sup_t norm of p_h in L^s'_max"),
    ("B12", "sup_t interior W^2,inf norm of p_h"),
    ("B13", "surrogate: time-derivative dual norm on divergence-free bubbles"),
    ("B14", "surrogate: dual norm of d_t(u + grad p_h) on W^1,s_max sine modes"),
]
SURROGATES = ("B13", "B14")


def _lp_spacetime(fields, p, dts, h2):
    total = sum(dt * h2 * float((np.abs(a) ** p).sum()) for a, dt in zip(fields, dts))
    return total ** (1.0 / p)


def _bubble_tests(cfg):
    """Divergence-free bubbles normalized in a discrete W^{2,inf} norm."""
    grid = cfg.grid
    Lx, Ly = cfg.domain.extents
    ox, oy = cfg.domain.origin
    out = []
    for k in (1, 2):
        for l in (1, 2):
            def stream(X, Y, k=k, l=l):
                return (np.sin(k * np.pi * (X - ox) / Lx) * np.sin(l * np.pi * (Y - oy) / Ly)) ** 2
            w = stream_velocity(grid, stream, cfg.domain.origin)
            u, v = grid.unpack(w)
            norm = max(_w2inf(u, grid.h), _w2inf(v, grid.h))
            out.append(w / norm)
    return out


def _w2inf(a, h):
    vals = [np.abs(a).max()]
    for ax in (0, 1):
        vals.append(np.abs(np.diff(a, axis=ax)).max() / h)
        vals.append(np.abs(np.diff(a, n=2, axis=ax)).max(initial=0.0) / h ** 2)
    return max(vals)


def _sine_tests(cfg, q):
    """Sine modes per component normalized in a discrete W^{1,q} norm."""
    grid = cfg.grid
    Lx, Ly = cfg.domain.extents
    ox, oy = cfg.domain.origin
    (xu, yu), (xv, yv) = grid.face_coordinates(cfg.domain.origin)
    out = []
    for k in (1, 2):
        for l in (1, 2):
            mode_u = np.sin(k * np.pi * (xu - ox) / Lx) * np.sin(l * np.pi * (yu - oy) / Ly)
            mode_v = np.sin(k * np.pi * (xv - ox) / Lx) * np.sin(l * np.pi * (yv - oy) / Ly)
            for w in (grid.pack(mode_u, 0 * mode_v), grid.pack(0 * mode_u, mode_v)):
                g = velocity_gradient_magnitude(grid, w)
                norm = (grid.h ** 2 * ((np.abs(w) ** q).sum() + (g ** q).sum())) ** (1.0 / q)
                out.append(w / norm)
    return out


@dataclass(frozen=True, eq=False)
class ThetaRun:
    theta: float
    state: SolverState = None
    columns: dict = None
    error: str = None


def _run_columns(cfg, state):
    grid, h2 = cfg.grid, cfg.grid.h ** 2
    reg = cfg.regularized
    recs = state.history
    steps = recs[1:]
    dts = [b.t - a.t for a, b in zip(recs[:-1], recs[1:])]
    s_max, sc_max = reg.s_max, reg.s_max_conjugate
    s_min, s0 = cfg.exponent.s_min, pressure_exponent(2)
    theta = reg.theta
    cols = {}
    cols["B1"] = max(2.0 * r.kinetic for r in recs)
    b = dict.fromkeys(("B2", "B3", "B4", "B5", "B6", "B7"), 0.0)
    for r, dt in zip(steps, dts):
        d11, d22, d12 = strains(grid, r.w)
        mag = strain_magnitude(grid, d11, d22, d12)
        base = reg.base.coefficient(mag, r.s)
        sc = r.s / (r.s - 1.0)
        grad = velocity_gradient_magnitude(grid, r.w).ravel()
        speed = np.linalg.norm(grid.cell_velocity(r.w), axis=-1).ravel()
        b["B2"] += dt * h2 * float((mag ** r.s).sum())
        b["B3"] += dt * h2 * float((grad ** s_min + speed ** s_min).sum())
        b["B4"] += dt * h2 * float((speed ** s0).sum())
        b["B5"] += dt * h2 * float(((base * mag) ** sc).sum())
        b["B6"] += dt * h2 * float((mag ** s_max).sum())
        b["B7"] += dt * h2 * float(((theta * s_max * mag ** (s_max - 1.0)) ** sc_max).sum())
    cols["B2"] = b["B2"]
    cols["B3"] = b["B3"] ** (1.0 / s_min)
    cols["B4"] = b["B4"] ** (1.0 / s0)
    cols["B5"] = b["B5"]
    cols["B6"] = theta * b["B6"]
    cols["B7"] = theta ** (1.0 - sc_max) * b["B7"]
    bundles = [r.pressures for r in steps]
    if bundles and all(p is not None for p in bundles):
        nb = bundles[0].p1.shape[0]
        cols["B8"] = sum(_lp_spacetime([p.p1[i] for p in bundles], sc_max, dts, h2) for i in range(nb))
        cols["B9"] = sum(_lp_spacetime([p.p2[i] for p in bundles], s0 / 2.0, dts, h2) for i in range(nb))
        p4 = _lp_spacetime([p.p4 for p in bundles], sc_max, dts, h2)
        cols["p4_norm"] = p4
        cols["B10"] = theta ** (-1.0 / s_max) * p4
        cols["B11"] = max((h2 * float((np.abs(p.ph) ** sc_max).sum())) ** (1.0 / sc_max) for p in bundles)
        inner = cfg.domain.boundary_distance >= min(cfg.domain.extents) / 8.0
        idx = np.argwhere(inner)
        sl = tuple(slice(lo, hi + 1) for lo, hi in zip(idx.min(0), idx.max(0)))
        cols["B12"] = max(_w2inf(p.ph[sl], grid.h) for p in bundles)
        tests = _sine_tests(cfg, s_max)
        prev = recs[0].w
        total = 0.0
        for r, p in zip(steps, bundles):
            v = r.w + grid.G @ p.ph.ravel()
            total += max(abs(h2 * float((v - prev) @ t)) for t in tests)
            prev = v
        cols["B14"] = total
    else:
        for k in ("B8", "B9", "B10", "B11", "B12", "B14", "p4_norm"):
            cols[k] = np.nan
    bubbles = _bubble_tests(cfg)
    cols["B13"] = sum(max(abs(h2 * float((b_.w - a.w) @ t)) for t in bubbles) for a, b_ in zip(recs[:-1], recs[1:]))
    cols["identification_error"] = identification_error(cfg, state)
    return cols


def _space_time(cfg, state):
    """Per-step cell strain magnitudes, exponents and time samples at step midpoints."""
    grid = cfg.grid
    recs = state.history
    steps = recs[1:]
    mids = [0.5 * (a.t + b.t) for a, b in zip(recs[:-1], recs[1:])]
    dts = [b.t - a.t for a, b in zip(recs[:-1], recs[1:])]
    mags = np.stack([strain_magnitude(grid, *strains(grid, r.w)).reshape(grid.nx, grid.ny) for r in steps])
    return mags, TimeSamples(mids, dts)


def identification_error(cfg, state):
    """||S^theta(Du^theta) - S(Du^theta)||_{L^{s'(t,x)}}, the regularizing stress alone."""
    if len(state.history) < 2:
        return 0.0
    mags, samples = _space_time(cfg, state)
    pen = cfg.regularized.penalty_coefficient(mags) * mags
    return luxemburg_norm(pen, cfg.exponent.conjugate, samples=samples).luxemburg_norm


@dataclass(frozen=True, eq=False)
class ThetaSweep:
    theta_list: tuple
    runs: tuple
    columns: dict
    factor: float
    flags: dict
    notes: tuple

    @property
    def passed(self):
        return all(v == "PASS" for v in self.flags.values())

    def growth(self, name):
        col = self.columns[name]
        return float(col[-1] / col[0]) if col[0] != 0 else (np.inf if col[-1] != 0 else 1.0)

    def to_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        names = list(self.columns)
        wr.writerow(["theta"] + [f"{k} (surrogate)" if k in SURROGATES else k for k in names])
        for i, th in enumerate(self.theta_list):
            wr.writerow([repr(float(th))] + [repr(float(self.columns[k][i])) for k in names])
        return out.getvalue()


def theta_sweep(config, theta_list, *, factor=3.0, u0=None):
    """Solve for each theta (largest first) and tabulate the monitored bounds.

    A column is flagged FAIL when its value at the smallest theta exceeds
    ``factor`` times its value at the largest; the p4 norm must decrease
    strictly.  Failed runs are recorded and the sweep continues.
    """
    theta_list = tuple(float(t) for t in theta_list)
    if not theta_list or any(t <= 0 for t in theta_list):
        raise ConfigurationError("theta list must be nonempty and positive")
    if any(b >= a for a, b in zip(theta_list[:-1], theta_list[1:])):
        raise ConfigurationError("theta list must be strictly decreasing")
    runs = []
    for th in theta_list:
        cfg = replace(config, theta=th, store_pressures=True)
        try:
            state = simulate(cfg, u0)
            runs.append(ThetaRun(th, state, _run_columns(cfg, state)))
        except VexflowError as exc:
            log.warning("theta=%g run failed: %s", th, exc)
            runs.append(ThetaRun(th, error=str(exc)))
    names = [k for k, _ in MONITORED] + ["p4_norm", "identification_error"]
    columns = {k: np.array([r.columns[k] if r.columns else np.nan for r in runs]) for k in names}
    flags, notes = {}, []
    if any(r.error for r in runs):
        flags["runs"] = "FAIL"
        notes.extend(f"theta={r.theta:g}: {r.error}" for r in runs if r.error)
    if len(theta_list) < 2:
        notes.append("single theta: trend checks skipped")
    else:
        for k, _ in MONITORED:
            col = columns[k]
            if not np.all(np.isfinite(col)):
                flags[k] = "FAIL"
            elif col[0] == 0:
                flags[k] = "PASS" if col[-1] == 0 else "FAIL"
            else:
                flags[k] = "PASS" if col[-1] / col[0] < factor else "FAIL"
        p4 = columns["p4_norm"]
        flags["p4_decreasing"] = "PASS" if np.all(np.diff(p4) < 0) else "FAIL"
    return ThetaSweep(theta_list, tuple(runs), columns, factor, flags, tuple(notes))


# --------------------------------------------------------------------- Minty


def sample_eta(n, seed=0, scale=1.0, d=2):
    """``n`` random constant symmetric tensors with Frobenius norms spread over [0, 2 scale]."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d, d))
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    a /= np.linalg.norm(a, axis=(1, 2), keepdims=True)
    return a * (2.0 * scale * rng.random(n))[:, None, None]


@dataclass(frozen=True, eq=False)
class MintyReport:
    thetas: tuple
    integrals: np.ndarray
    scales: np.ndarray
    errors: np.ndarray
    limit_distances: np.ndarray
    tol: float

    @property
    def monotone_ok(self):
        return bool(np.all(self.integrals >= -self.tol * self.scales))

    @property
    def decreasing(self):
        return bool(len(self.errors) < 2 or np.all(np.diff(self.errors) < 0))

    @property
    def identification_failure(self):
        return not self.decreasing

    def to_csv(self):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["theta", "identification_error", "limit_distance", "min_scaled_integral"])
        for i, th in enumerate(self.thetas):
            m = float((self.integrals[i] / np.where(self.scales[i] > 0, self.scales[i], 1.0)).min())
            wr.writerow([repr(float(th)), repr(float(self.errors[i])), repr(float(self.limit_distances[i])), repr(m)])
        return out.getvalue()


def minty_identification(sweep, eta_samples, psi, tol=1e-8):
    """Monotonicity integrals against constant tensors and the identification trend.

    For each run and each ``eta`` the space-time integral of
    ``(S(Du) - S(eta)) : (Du - eta) psi`` is computed with the base law.  The
    identification error of each run is the size of the regularizing stress
    in the conjugate-exponent norm; ``limit_distances`` compare the stress of
    each run with that of the smallest theta, the limit surrogate.
    """
    runs = [r for r in sweep.runs if r.state is not None]
    if not runs:
        raise DependencyError("sweep has no completed runs")
    eta = np.asarray(eta_samples, dtype=float)
    cfg0 = runs[0].state.config
    grid = cfg0.grid
    X, Y = grid.cell_coordinates(cfg0.domain.origin)
    weight = np.broadcast_to(psi(X, Y), X.shape)
    h2 = grid.h ** 2
    base = cfg0.model

    def stress_series(state):
        out = []
        for r in state.history[1:]:
            xi = cell_strain_tensor(grid, r.w)
            s = r.s.reshape(grid.nx, grid.ny)
            out.append((xi, s, r.phi.reshape(grid.nx, grid.ny), r.t - 0.0))
        return out

    limit = runs[-1].state
    limit_stress = [phi[..., None, None] * xi for xi, _, phi, _ in stress_series(limit)]
    integrals = np.zeros((len(runs), len(eta)))
    scales = np.zeros_like(integrals)
    errors, dists = [], []
    for i, run in enumerate(runs):
        st = run.state
        dts = np.diff([r.t for r in st.history])
        series = stress_series(st)
        for (xi, s, phi, _), dt in zip(series, dts):
            nxi = np.linalg.norm(xi, axis=(-1, -2))
            S_xi = base.coefficient(nxi, s)[..., None, None] * xi
            for k, e in enumerate(eta):
                ne = np.linalg.norm(e)
                S_e = base.coefficient(ne, s)[..., None, None] * e
                integrand = ((S_xi - S_e) * (xi - e)).sum(axis=(-1, -2))
                integrals[i, k] += dt * h2 * float((integrand * weight).sum())
                size = (np.linalg.norm(S_xi, axis=(-1, -2)) + np.linalg.norm(S_e, axis=(-1, -2))) * (nxi + ne)
                scales[i, k] += dt * h2 * float((size * np.abs(weight)).sum())
        errors.append(identification_error(st.config, st))
        diff = np.stack([phi[..., None, None] * xi - L for (xi, _, phi, _), L in zip(series, limit_stress)])
        _, samples = _space_time(st.config, st)
        dists.append(luxemburg_norm(diff, st.config.exponent.conjugate, samples=samples).luxemburg_norm)
    return MintyReport(tuple(r.theta for r in runs), integrals, scales, np.array(errors), np.array(dists), tol)


# -------------------------------------------------------------- interpolation


def interpolation_exponent(q, d):
    """r0 = q (1 + 2/d)."""
    return q * (1.0 + 2.0 / d)


@dataclass(frozen=True)
class InterpolationReport:
    q: float
    r0: float
    norm_r0: float
    norm_linf_l2: float
    norm_lq_w1q: float
    constant: float


def interpolation_check(trajectory, q=2.0):
    """Empirical constant C in ||u||_{r0}^{r0} <= C ||u||_{L^inf L^2}^{2q/d} ||u||_{L^q W^{1,q}}^q."""
    if q < 2:
        raise ConfigurationError("the interpolation inequality needs q >= 2")
    if not isinstance(trajectory, SolverState):
        raise DependencyError("interpolation check needs a solver state")
    grid = trajectory.config.grid
    d, h2 = 2, grid.h ** 2
    r0 = interpolation_exponent(q, d)
    recs = trajectory.history
    linf_l2 = max(np.sqrt(2.0 * r.kinetic) for r in recs)
    a = b = 0.0
    for prev, r in zip(recs[:-1], recs[1:]):
        dt = r.t - prev.t
        speed = np.linalg.norm(grid.cell_velocity(r.w), axis=-1)
        grad = velocity_gradient_magnitude(grid, r.w)
        a += dt * h2 * float((speed ** r0).sum())
        b += dt * h2 * float((speed ** q + grad ** q).sum())
    lq = b ** (1.0 / q)
    denom = linf_l2 ** (2.0 * q / d) * lq ** q
    const = a / denom if denom > 0 else 0.0
    return InterpolationReport(q, r0, a ** (1.0 / r0), linf_l2, lq, const)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"VXFC"
CHECKPOINT_VERSION = 1
_FILE_HEADER = struct.Struct("<4sI")
_BLOCK_HEADER = struct.Struct("<qddII")


def write_checkpoint(stream, records, theta, grid):
    """Write per-step blocks: header (step, t, theta, nx, ny) then u and v, little-endian float64.

    ``u`` has shape ``(nx + 1, ny)`` and ``v`` ``(nx, ny + 1)``, both row-major
    and including the (zero) wall faces.
    """
    stream.write(_FILE_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    for r in records:
        u, v = grid.unpack(r.w)
        stream.write(_BLOCK_HEADER.pack(int(r.step), float(r.t), float(theta), grid.nx, grid.ny))
        stream.write(u.astype("<f8").tobytes(order="C"))
        stream.write(v.astype("<f8").tobytes(order="C"))


def read_checkpoint(stream):
    """Inverse of :func:`write_checkpoint`; returns a list of dicts."""
    head = stream.read(_FILE_HEADER.size)
    if len(head) != _FILE_HEADER.size:
        raise DimensionError("checkpoint is truncated")
    magic, version = _FILE_HEADER.unpack(head)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError("not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    out = []
    while True:
        head = stream.read(_BLOCK_HEADER.size)
        if not head:
            return out
        if len(head) != _BLOCK_HEADER.size:
            raise DimensionError("checkpoint block header is truncated")
        step, t, theta, nx, ny = _BLOCK_HEADER.unpack(head)
        nu, nv = (nx + 1) * ny, nx * (ny + 1)
        payload = stream.read(8 * (nu + nv))
        if len(payload) != 8 * (nu + nv):
            raise DimensionError("checkpoint payload is truncated")
        data = np.frombuffer(payload, dtype="<f8")
        out.append({"step": step, "t": t, "theta": theta,
                    "u": data[:nu].reshape(nx + 1, ny).copy(), "v": data[nu:].reshape(nx, ny + 1).copy()})
