"""Constitutive laws: power-law and tabulated radial stresses, the s_max
regularization, and sampled verification of the structural assumptions.

Every law here is radial, ``S(xi) = phi(|xi|) xi`` with the Frobenius norm,
which keeps symmetric inputs symmetric and reduces monotonicity questions to
the scalar map ``r -> phi(r) r``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, SymmetryError


def _power(r, e):
    """r**e with the value at r = 0 taken as 0 (only used where the product with r vanishes)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(r, e)
    return np.where(r > 0, out, 0.0)


@dataclass(frozen=True, eq=False)
class StressModel:
    """A radial constitutive law.

    ``kind`` is ``"power_law"`` (coefficient ``nu0 + nu1 r^(s-2)``) or
    ``"table"`` (coefficient interpolated from ``table = (r_nodes, phi_nodes)``,
    held constant beyond the last node).  ``s`` is an exponent field or a
    constant; ``h`` is the coercivity offset and ``c`` the coercivity constant.
    """

    kind: str
    nu0: float = 0.0
    nu1: float = 0.0
    s: object = 2.0
    h: float = 1.0
    c: float = None
    table: tuple = None
    notes: dict = field(default_factory=dict)

    def exponent_at(self, t, x):
        """Exponent at time ``t`` and points ``x`` (shape ``(..., d)``), nearest cell."""
        if np.isscalar(self.s):
            return np.full(np.shape(x)[:-1], float(self.s))
        dom = self.s.domain
        x = np.asarray(x, dtype=float)
        idx = tuple(
            np.clip(np.floor((x[..., k] - o) / dom.h).astype(int), 0, n - 1)
            for k, (o, n) in enumerate(zip(dom.origin, dom.shape))
        )
        return self.s.at_time(t)[idx]

    @property
    def exponent_range(self):
        if np.isscalar(self.s):
            return float(self.s), float(self.s)
        return self.s.s_min, self.s.s_max

    def coefficient(self, r, s):
        """phi(r) for magnitudes ``r`` and exponents ``s`` (broadcast)."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power_law":
            return self.nu0 + self.nu1 * _power(r, np.asarray(s, dtype=float) - 2.0)
        nodes, vals = self.table
        return np.interp(r, nodes, vals)

    def coefficient_slope(self, r, s):
        """phi'(r) / r, the term entering the Jacobian of ``phi(|xi|) xi`` (0 at r = 0)."""
        r = np.asarray(r, dtype=float)
        if self.kind == "power_law":
            s = np.asarray(s, dtype=float)
            return self.nu1 * (s - 2.0) * _power(r, s - 4.0)
        nodes, vals = self.table
        slopes = np.diff(vals) / np.diff(nodes)
        k = np.clip(np.searchsorted(nodes, r, side="right") - 1, 0, len(slopes) - 1)
        inside = (r >= nodes[0]) & (r < nodes[-1]) & (r > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(inside, slopes[k] / r, 0.0)

    def potential(self, r, s):
        """Scalar potential W with W'(r) = phi(r) r (power law only)."""
        if self.kind != "power_law":
            raise ConfigurationError("potential is only available for the power law")
        r = np.asarray(r, dtype=float)
        s = np.asarray(s, dtype=float)
        return 0.5 * self.nu0 * r * r + self.nu1 * _power(r, s) / s


def power_law(nu0, nu1, s, h=1.0, c=None):
    """Power-law model; ``c`` defaults to the sampled coercivity constant."""
    if nu0 < 0 or nu1 < 0 or nu0 + nu1 <= 0:
        raise ConfigurationError("viscosities must be nonnegative and not both zero")
    model = StressModel("power_law", float(nu0), float(nu1), s, float(h))
    if c is None:
        model = replace(model, c=coercivity_constant(model), notes={"c": "sampled, 1.5x safety, at least 1", "h": "constant"})
    return model


def table_law(r_nodes, phi_nodes, s, h=1.0, c=None):
    r_nodes = np.asarray(r_nodes, dtype=float)
    phi_nodes = np.asarray(phi_nodes, dtype=float)
    if r_nodes.ndim != 1 or r_nodes.shape != phi_nodes.shape or len(r_nodes) < 2:
        raise ConfigurationError("stress table needs matching 1-D node and value arrays")
    if np.any(np.diff(r_nodes) <= 0) or r_nodes[0] < 0:
        raise ConfigurationError("stress table magnitudes must be nonnegative and increasing")
    model = StressModel("table", s=s, h=float(h), table=(r_nodes, phi_nodes))
    if c is None:
        model = replace(model, c=coercivity_constant(model), notes={"c": "sampled, 1.5x safety, at least 1", "h": "constant"})
    return model


def tensor_norm(xi):
    return np.sqrt((np.asarray(xi) ** 2).sum(axis=(-1, -2)))


def _check_symmetric(xi):
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != xi.shape[-2]:
        raise SymmetryError("stress argument is not a square tensor")
    gap = np.abs(xi - np.swapaxes(xi, -1, -2)).max(initial=0.0)
    if gap > 1e-12 * (1.0 + np.abs(xi).max(initial=0.0)):
        raise SymmetryError(f"stress argument is not symmetric (asymmetry {gap:.3e})")
    return xi


def evaluate_stress(model, t, x, xi):
    """S(t, x, xi) for symmetric ``xi`` of shape ``(..., d, d)`` at points ``x`` of shape ``(..., d)``."""
    xi = _check_symmetric(xi)
    s = model.exponent_at(t, x)
    return model.coefficient(tensor_norm(xi), s)[..., None, None] * xi


@dataclass(frozen=True, eq=False)
class RegularizedStress:
    """``S + theta * grad |xi|^s_max``."""

    base: StressModel
    theta: float
    s_max: float = None

    def __post_init__(self):
        if self.theta < 0:
            raise ConfigurationError("theta must be nonnegative")
        if self.s_max is None:
            object.__setattr__(self, "s_max", self.base.exponent_range[1])
        if self.s_max < self.base.exponent_range[1]:
            raise ConfigurationError("s_max is below the largest exponent of the base law")

    @property
    def s_max_conjugate(self):
        return self.s_max / (self.s_max - 1.0)

    @property
    def C_star(self):
        return (self.s_max - 1.0) / self.s_max ** self.s_max_conjugate

    def coefficient(self, r, s):
        return self.base.coefficient(r, s) + self.theta * self.s_max * _power(np.asarray(r, float), self.s_max - 2.0)

    def coefficient_slope(self, r, s):
        extra = self.theta * self.s_max * (self.s_max - 2.0) * _power(np.asarray(r, float), self.s_max - 4.0)
        return self.base.coefficient_slope(r, s) + extra

    def penalty_coefficient(self, r):
        """Coefficient of the regularizing part alone: theta s_max r^(s_max-2)."""
        return self.theta * self.s_max * _power(np.asarray(r, float), self.s_max - 2.0)

    def theta_constants(self):
        """(c_theta, h_theta) from the base coercivity data."""
        c = self.base.c
        k = min(min(1.0, c * self.C_star) * 2.0 ** (1.0 - self.s_max_conjugate), c * self.theta)
        if k <= 0:
            return np.inf, np.inf
        return c / k, (self.base.h + 1.0) / k


def regularized_stress(reg, t, x, xi):
    xi = _check_symmetric(xi)
    s = reg.base.exponent_at(t, x)
    return reg.coefficient(tensor_norm(xi), s)[..., None, None] * xi


def young_identity_residual(reg, xi):
    """|grad m . xi - |xi|^s_max - C_* |grad m|^s'_max| for m(xi) = |xi|^s_max."""
    xi = np.asarray(xi, dtype=float)
    r = tensor_norm(xi)
    grad = (reg.s_max * _power(r, reg.s_max - 2.0))[..., None, None] * xi
    lhs = (grad * xi).sum(axis=(-1, -2))
    rhs = _power(r, reg.s_max) + reg.C_star * _power(tensor_norm(grad), reg.s_max_conjugate)
    return np.abs(lhs - rhs)


def coercivity_constant(model, n_mag=4001, n_exp=17, mag_range=(1e-4, 1e6)):
    """max(1, 1.5 sup (|xi|^s + |S|^s' - h) / (S : xi)) over a magnitude-exponent scan.

    Pairs where ``S : xi <= 0`` are skipped; the assumption check reports them.
    """
    lo, hi = model.exponent_range
    s = np.linspace(lo, hi, n_exp)[:, None]
    r = np.geomspace(*mag_range, n_mag)[None, :]
    phi = model.coefficient(r, s)
    work = phi * r * r
    sp = s / (s - 1.0)
    num = r ** s + np.abs(phi * r) ** sp - model.h
    ok = work > 0
    ratio = np.where(ok, num / np.where(ok, work, 1.0), -np.inf)
    return float(max(1.0, 1.5 * ratio.max()))


# ---------------------------------------------------------- verification


@dataclass(frozen=True)
class Check:
    name: str
    min_residual: float
    witness: str
    passed: bool


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple
    theta: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["check", "min_residual", "passed", "witness"])
        for c in self.checks:
            w.writerow([c.name, repr(c.min_residual), "PASS" if c.passed else "FAIL", c.witness])
        return out.getvalue()


def random_symmetric(rng, n, d, mag_range):
    a = rng.standard_normal((n, d, d))
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    a /= tensor_norm(a)[:, None, None]
    mags = np.exp(rng.uniform(np.log(mag_range[0]), np.log(mag_range[1]), n))
    return a * mags[:, None, None]


def _sample_exponents(s, rng, n):
    if np.isscalar(s):
        return np.full(n, float(s))
    inside = s.values[:, s.domain.mask].ravel()
    return inside[rng.integers(0, inside.size, n)]


def _witness(xi, s, extra=""):
    return f"|xi|={tensor_norm(xi):.6g} s={s:.6g}{extra}"


def verify_assumptions(law, n_samples=10_000, mag_range=(1e-3, 1e3), theta=None, *, d=2, seed=0, tol=1e-9):
    """Sample the structural conditions for a law (or its regularization).

    With ``theta`` (or a regularized law) the report adds the regularized
    coercivity, the L^s_max coercivity and strict monotonicity checks.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    if isinstance(law, RegularizedStress):
        base, reg = law.base, law
    else:
        base = law
        reg = RegularizedStress(law, theta) if theta is not None else None
    if not np.isscalar(base.s):
        d = base.s.d
    rng = np.random.default_rng(seed)
    xi = random_symmetric(rng, n_samples, d, mag_range)
    s = _sample_exponents(base.s, rng, n_samples)
    sp = s / (s - 1.0)
    r = tensor_norm(xi)
    checks = []

    def add(name, values, scale, strict=False, pair_info=None):
        rel = values / scale
        k = int(np.argmin(rel))
        ok = bool(np.all(values > 0)) if strict else bool(rel[k] >= -tol)
        wit = _witness(xi[k], s[k], pair_info(k) if pair_info else "")
        checks.append(Check(name, float(rel[k]), "" if ok else wit, ok))

    zero = base.coefficient(np.zeros(n_samples), s)[:, None, None] * np.zeros_like(xi)
    checks.append(Check("T1", float(np.abs(zero).max()), "", bool(np.all(zero == 0))))

    phi = base.coefficient(r, s)
    work = phi * r * r
    Snorm = np.abs(phi) * r
    t2 = base.c * work - r ** s - Snorm ** sp + base.h
    add("T2", t2, 1.0 + r ** s + Snorm ** sp + base.h)

    # monotonicity on shuffled pairs (same exponent) and on colinear pairs
    lam = np.exp(rng.uniform(np.log(0.5), np.log(2.0), n_samples))
    lam = np.where(np.abs(lam - 1) < 1e-3, 1.5, lam)
    perm = rng.permutation(n_samples)
    xi2 = np.concatenate([xi[perm] * (r / r[perm])[:, None, None] * lam[:, None, None], lam[:, None, None] * xi])

    def pair_values(coef):
        xi1 = np.concatenate([xi, xi])
        ss = np.concatenate([s, s])
        S1 = coef(tensor_norm(xi1), ss)[:, None, None] * xi1
        S2 = coef(tensor_norm(xi2), ss)[:, None, None] * xi2
        diff = ((S1 - S2) * (xi1 - xi2)).sum(axis=(1, 2))
        scale = 1.0 + tensor_norm(S1 - S2) * tensor_norm(xi1 - xi2)
        return diff, scale

    def mono(name, coef, strict):
        diff, scale = pair_values(coef)
        rel = diff / scale
        k = int(np.argmin(rel))
        ok = bool(np.all(diff > 0)) if strict else bool(rel[k] >= -tol)
        wit = ""
        if not ok:
            j = k % n_samples
            wit = f"xi1: |xi|={tensor_norm(xi[j]):.6g}, xi2: |xi|={tensor_norm(xi2[k]):.6g}, s={s[j]:.6g}"
        checks.append(Check(name, float(rel[k]), wit, ok))

    mono("T3", base.coefficient, strict=False)

    if reg is not None:
        zero = reg.coefficient(np.zeros(n_samples), s)[:, None, None] * np.zeros_like(xi)
        checks.append(Check("R1", float(np.abs(zero).max()), "", bool(np.all(zero == 0))))
        pen = reg.penalty_coefficient(r) * r * r
        reg_work = work + pen
        r2 = base.c * reg_work - r ** s - Snorm ** sp - pen + base.h
        add("R2", r2, 1.0 + r ** s + Snorm ** sp + pen + base.h)
        c_t, h_t = reg.theta_constants()
        if np.isfinite(c_t):
            St = np.abs(reg.coefficient(r, s)) * r
            r3 = c_t * reg_work - r ** reg.s_max - St ** reg.s_max_conjugate + h_t
            add("R3", r3, 1.0 + r ** reg.s_max + St ** reg.s_max_conjugate + h_t)
        else:
            checks.append(Check("R3", float("nan"), "theta = 0: no L^s_max coercivity constant", reg.theta == 0))
        mono("R4", reg.coefficient, strict=reg.theta > 0)
        young = young_identity_residual(reg, xi) / (1.0 + r ** reg.s_max)
        k = int(np.argmax(young))
        checks.append(Check("young", float(-young[k]), "" if young[k] <= 1e-12 else _witness(xi[k], s[k]), bool(young[k] <= 1e-12)))
    return AssumptionReport(tuple(checks), 0.0 if reg is None else reg.theta)
