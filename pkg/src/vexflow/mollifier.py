"""Discrete mollification in space and time, localized double smoothing and
the estimates that accompany them.

Spatial fields are laid out as ``(*leading, *grid, *components)``; pass the
number of leading (time) axes as ``leading``.  Values outside the region are
treated as zero in every spatial convolution.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError, SupportLeakError, UnderResolvedKernelError
from .exponent import TimeSamples, modular


def bump(r):
    """exp(-1 / (1 - r^2)) on |r| < 1, zero elsewhere."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def unit_kernel_constants(d):
    """(mass, sup of the profile, sup of its gradient) of the unnormalized unit bump in R^d."""
    r = np.linspace(0.0, 1.0, 200001)[:-1]
    prof = bump(r)
    grad = prof * 2 * r / (1 - r * r) ** 2
    t, w = np.polynomial.legendre.leggauss(200)
    t, w = 0.5 * (t + 1), 0.5 * w
    sphere = 2 * np.pi if d == 2 else 4 * np.pi
    mass = sphere * float((w * bump(t) * t ** (d - 1)).sum())
    return mass, float(prof.max()), float(grad.max())


@dataclass(frozen=True, eq=False)
class Kernel:
    """Discrete radial kernel ``eta_eps`` on the offsets ``|k| h < eps``, unit discrete mass."""

    eps: float
    h: float
    d: int
    weights: np.ndarray

    @property
    def mass(self):
        return float(self.weights.sum() * self.h ** self.d)

    @property
    def radius_cells(self):
        return self.weights.shape[0] // 2

    @property
    def discrete_mass_ratio(self):
        """Continuum mass of the unnormalized profile over its discrete mass at this resolution."""
        raw = bump(self.offsets_norm()).sum() * (self.h / self.eps) ** self.d
        return unit_kernel_constants(self.d)[0] / raw

    def offsets_norm(self):
        m = self.radius_cells
        g = np.arange(-m, m + 1) * self.h / self.eps
        G = np.meshgrid(*([g] * self.d), indexing="ij")
        return np.sqrt(sum(a * a for a in G))

    def sup_gradient(self):
        """Upper bound on |grad eta_eps| for the continuum profile behind the discrete weights."""
        mass, _, grad = unit_kernel_constants(self.d)
        return grad * self.discrete_mass_ratio / mass / self.eps ** (self.d + 1)


def make_kernel(eps, h, d, time=False):
    if eps < 2 * h - 1e-12 * h:
        unit = "time step" if time else "grid spacing"
        raise UnderResolvedKernelError(f"eps={eps} is below two of the {unit} h={h}")
    m = int(np.ceil(eps / h - 1e-12)) - 1
    dims = 1 if time else d
    g = np.arange(-m, m + 1) * h / eps
    G = np.meshgrid(*([g] * dims), indexing="ij")
    w = bump(np.sqrt(sum(a * a for a in G)))
    w = w / (w.sum() * h ** dims)
    return Kernel(float(eps), float(h), dims, w)


def _spatial_kernel(weights, ndim, leading, d):
    return weights.reshape((1,) * leading + weights.shape + (1,) * (ndim - leading - d))


def _zero_outside(u, domain, leading):
    m = domain.mask.reshape((1,) * leading + domain.shape + (1,) * (u.ndim - leading - domain.d))
    return np.where(m, u, 0.0)


def spatial_mollify(u, eps, domain, *, leading=0, periodic=False):
    """Convolve the spatial axes with the unit-mass kernel of radius ``eps``.

    With ``periodic=True`` the grid wraps around and the region mask is not
    applied; otherwise ``u`` is extended by zero outside the region.
    """
    u = np.asarray(u, dtype=float)
    kern = make_kernel(eps, domain.h, domain.d)
    k = _spatial_kernel(kern.weights * domain.cell_volume, u.ndim, leading, domain.d)
    if periodic:
        return ndimage.correlate(u, k, mode="wrap")
    return ndimage.correlate(_zero_outside(u, domain, leading), k, mode="constant", cval=0.0)


def extend_in_time(u, pad, extension="zero", u0=None):
    """Pad the leading time axis by ``pad`` samples on each side.

    ``zero`` pads with zeros, ``edge`` repeats the end values, ``energy``
    holds ``u0`` (default the first sample) before the interval and zero after.
    """
    u = np.asarray(u, dtype=float)
    width = [(pad, pad)] + [(0, 0)] * (u.ndim - 1)
    if extension == "zero":
        return np.pad(u, width)
    if extension == "edge":
        return np.pad(u, width, mode="edge")
    if extension == "energy":
        first = u[0] if u0 is None else np.asarray(u0, dtype=float)
        before = np.broadcast_to(first, (pad,) + u.shape[1:])
        return np.concatenate([before, u, np.zeros((pad,) + u.shape[1:])])
    raise ConfigurationError(f"unknown time extension {extension!r}")


def temporal_mollify(u, eps, dt, *, extension="zero", u0=None):
    """Convolve the leading time axis with the unit-mass kernel of radius ``eps``."""
    u = np.asarray(u, dtype=float)
    kern = make_kernel(eps, dt, 1, time=True)
    pad = kern.radius_cells
    ext = extend_in_time(u, pad, extension, u0)
    k = (kern.weights * dt).reshape((-1,) + (1,) * (u.ndim - 1))
    out = ndimage.correlate(ext, k, mode="constant", cval=0.0)
    return out[pad:pad + u.shape[0]]


def support_margin(psi, domain):
    """Largest admissible eps for a cutoff: half the grid distance from supp psi to the boundary, less one cell."""
    psi = np.asarray(psi, dtype=float)
    support = (psi != 0) & domain.mask
    if (psi[~domain.mask] != 0).any():
        return 0.0
    if not support.any():
        return np.inf
    gap = float(domain.boundary_distance[support].min())
    return max(0.0, 0.5 * (gap - domain.h))


def localized_double_smooth(u, psi, eps, domain, *, leading=0):
    """Return ``((u * eta) psi) * eta``; ``psi`` is a grid field broadcast over components."""
    eps0 = support_margin(psi, domain)
    if eps >= eps0:
        raise SupportLeakError(f"eps={eps} is not below the support margin eps0={eps0:.6g}")
    u = np.asarray(u, dtype=float)
    once = spatial_mollify(u, eps, domain, leading=leading)
    p = np.asarray(psi, dtype=float).reshape((1,) * leading + domain.shape + (1,) * (u.ndim - leading - domain.d))
    return spatial_mollify(once * p, eps, domain, leading=leading)


def symmetric_gradient(v, domain, *, leading=0):
    """Centered-difference symmetric gradient of a cell-centered vector field -> ``(..., d, d)``."""
    d = domain.d
    grads = np.stack(
        [np.gradient(v, domain.h, axis=leading + j) for j in range(d)], axis=-1
    )
    return 0.5 * (grads + np.swapaxes(grads, -1, -2))


def linf_bound_constant(u, psi, eps, domain, *, leading=0):
    """Constant E with sup |D((u^eps psi)^eps)| <= E / eps^(d+1)."""
    u = np.asarray(u, dtype=float)
    d = domain.d
    kern = make_kernel(eps, domain.h, d)
    mag = np.sqrt((u ** 2).reshape(u.shape[:leading + d] + (-1,)).sum(-1))
    l1 = (mag * domain.mask).reshape(u.shape[:leading] + (-1,)).sum(-1) * domain.cell_volume
    psi_max = float(np.abs(psi).max())
    return d * psi_max * float(np.max(l1)) * kern.sup_gradient() * eps ** (d + 1)


@dataclass(frozen=True)
class ConvergenceLadder:
    eps_list: tuple
    l1_distances: tuple
    modular_distances: tuple
    linf_bounds: tuple
    E: float
    eps0: float
    passed: bool

    def to_csv(self, d):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["eps", "l1_distance", "modular_distance", "linf_times_eps_pow"])
        for e, a, b, c in zip(self.eps_list, self.l1_distances, self.modular_distances, self.linf_bounds):
            w.writerow([repr(e), repr(a), repr(b), repr(c * e ** (d + 1))])
        return out.getvalue()


def _check_trace(u, domain):
    if np.any(u[:, ~domain.mask] != 0):
        raise ContractError("velocity is not zero-extended outside the region")
    d = domain.d
    padded = np.pad(domain.mask, 1, constant_values=False)
    interior = padded.copy()
    for axis in range(d):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)
    layer = domain.mask & ~interior[(slice(1, -1),) * d]
    mag = np.sqrt((u ** 2).reshape(u.shape[:1 + d] + (-1,)).sum(-1))
    grads = [np.gradient(mag, domain.h, axis=1 + j) for j in range(d)]
    slope = float(np.sqrt(sum(g ** 2 for g in grads)).max())
    if mag[:, layer].max() > np.sqrt(d) * domain.h * slope + 1e-12:
        raise ContractError("velocity does not vanish at the boundary (nonzero trace)")


def convergence_ladder(u, psi, eps_list, s, *, samples=None, l1_tol=None, modular_tol=None):
    """Distances of ``(u^eps psi)^eps`` to ``u psi`` over a decreasing ladder of eps.

    ``u`` has shape ``(n_t, *grid, d)`` matching ``samples`` (default one
    sample per exponent slab).  Thresholds default to a tenth of the norms of
    ``u psi`` and of its symmetric gradient.
    """
    domain = s.domain
    samples = samples or TimeSamples.per_slab(domain)
    u = np.asarray(u, dtype=float)
    eps_list = tuple(float(e) for e in eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError("eps_list must be strictly decreasing")
    _check_trace(u, domain)
    vol = domain.cell_volume
    w = samples.weights.reshape((-1,) + (1,) * (u.ndim - 1))
    p = np.asarray(psi, dtype=float)[None, ..., None]
    target = u * p
    d_target = symmetric_gradient(target, domain, leading=1)
    if l1_tol is None:
        l1_tol = 0.1 * float((w * np.abs(target)).sum() * vol)
    if modular_tol is None:
        modular_tol = 0.1 * modular(d_target, s, samples)
    l1, mod, linf, E = [], [], [], 0.0
    for eps in eps_list:
        v = localized_double_smooth(u, psi, eps, domain, leading=1)
        l1.append(float((w * np.abs(v - target)).sum() * vol))
        dv = symmetric_gradient(v, domain, leading=1)
        mod.append(modular(dv - d_target, s, samples))
        linf.append(float(np.sqrt((dv ** 2).sum(axis=(-1, -2))).max()))
        E = max(E, linf_bound_constant(u, psi, eps, domain, leading=1))
    decreasing = all(b <= a for a, b in zip(l1, l1[1:])) and all(b <= a for a, b in zip(mod, mod[1:]))
    passed = decreasing and l1[-1] <= l1_tol and mod[-1] <= modular_tol
    return ConvergenceLadder(eps_list, tuple(l1), tuple(mod), tuple(linf), E, support_margin(psi, domain), passed)


# ------------------------------------------------------- infimum estimates


def _ball_cells(domain, center, radius):
    X = domain.mesh()
    dist2 = sum((x - c) ** 2 for x, c in zip(X, center))
    return (dist2 <= radius ** 2 + 1e-12) & domain.mask


def minimizer_independence(s, centers, radius, magnitudes):
    """Largest mismatch between |xi|^s at the argmin of s and the sampled minimum over each ball.

    Zero (up to roundoff) means the minimizing cell does not depend on |xi| >= 1.
    """
    worst = 0.0
    for c in centers:
        sel = _ball_cells(s.domain, c, radius)
        if not sel.any():
            continue
        for v in s.values:
            vals = v[sel]
            star = vals[np.argmin(vals)]
            for m in magnitudes:
                best = float(np.min(m ** vals))
                worst = max(worst, abs(m ** star - best) / best)
    return worst


def comparability_constant(E, C, d):
    """M = E^(C / log 2) e^(C (d + 1))."""
    return E ** (C / np.log(2.0)) * np.exp(C * (d + 1))


def infimum_comparability(s, gammas, E, centers=None):
    """Worst ratio ``|xi|^s(y) / (M inf_z |xi|^s(z))`` over balls of radius gamma.

    The sampled |xi| is the top of the admissible range, where the ratio is
    largest.  Values <= 1 confirm the bound.  Returns ``{gamma: ratio}``.
    """
    domain = s.domain
    C = s.log_holder_C
    M = comparability_constant(E, C, domain.d)
    if centers is None:
        centers = np.stack(domain.mesh(), -1)[domain.mask]
    out = {}
    for g in gammas:
        top = E * g ** (-(domain.d + 1))
        if top < 1:
            out[float(g)] = 0.0
            continue
        osc = 0.0
        fp = _disk(g / domain.h, domain.d)
        for v in s.values:
            hi = ndimage.maximum_filter(np.where(domain.mask, v, -np.inf), footprint=fp, mode="constant", cval=-np.inf)
            lo = ndimage.minimum_filter(np.where(domain.mask, v, np.inf), footprint=fp, mode="constant", cval=np.inf)
            idx = _nearest_cells(domain, centers)
            osc = max(osc, float((hi[idx] - lo[idx]).max()))
        out[float(g)] = float(top ** osc / M)
    return out


def _disk(radius_cells, d):
    m = int(np.floor(radius_cells + 1e-9))
    g = np.arange(-m, m + 1)
    G = np.meshgrid(*([g] * d), indexing="ij")
    return sum(a * a for a in G) <= radius_cells ** 2 + 1e-9


def _nearest_cells(domain, points):
    points = np.atleast_2d(points)
    idx = [
        np.clip(np.floor((points[:, k] - o) / domain.h).astype(int), 0, n - 1)
        for k, (o, n) in enumerate(zip(domain.origin, domain.shape))
    ]
    return tuple(idx)


def double_average_distance(v, eps, domain, *, leading=0):
    """L1 distance between the twice-mollified field and the field itself."""
    v = np.asarray(v, dtype=float)
    twice = spatial_mollify(spatial_mollify(v, eps, domain, leading=leading), eps, domain, leading=leading)
    return float(np.abs(twice - _zero_outside(v, domain, leading)).sum() * domain.cell_volume)


def weighted_l2_gap(f, psi, eps, domain):
    """``|int |f^eps|^2 psi - int |f|^2 psi|`` for a field with trailing components."""
    f = np.asarray(f, dtype=float)
    fe = spatial_mollify(f, eps, domain)
    p = np.asarray(psi, dtype=float) * domain.mask
    sq = lambda a: (a ** 2).reshape(domain.shape + (-1,)).sum(-1)
    return float(abs(((sq(fe) - sq(_zero_outside(f, domain, 0))) * p).sum()) * domain.cell_volume)
