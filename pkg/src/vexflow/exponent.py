"""Variable exponents and the matching modular / Luxemburg-norm machinery.

A space-time field is stored with time samples on the leading axis, the grid
shape next, and optional component axes last; its pointwise magnitude is the
Euclidean norm over the component axes.  Integrals use the midpoint rule on
cell centers weighted by per-sample time weights.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import BoundsError, DataError, DimensionError, NumericalError


def lower_exponent_bound(d):
    """Smallest exponent admitted in dimension ``d``: (3d + 2) / (d + 2)."""
    return (3 * d + 2) / (d + 2)


def pressure_exponent(d):
    """s0 = 3 + 2/d; exact when ``d`` is a Fraction."""
    return 3 + 2 / d


def conjugate_exponent(p):
    """Hoelder conjugate p / (p - 1); exact for Fraction input."""
    return p / (p - 1)


@dataclass(frozen=True, eq=False)
class TimeSamples:
    """Sample times with quadrature weights for space-time integrals."""

    times: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if t.shape != w.shape:
            raise DimensionError("times and weights differ in length")
        if np.any(w < 0):
            raise DataError("time weights must be nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "weights", w)

    @classmethod
    def per_slab(cls, domain):
        edges = np.asarray(domain.slab_edges)
        return cls(0.5 * (edges[1:] + edges[:-1]), np.diff(edges))

    @classmethod
    def uniform(cls, domain, n):
        dt = domain.T / n
        return cls(dt * (np.arange(n) + 0.5), np.full(n, dt))

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True, eq=False)
class ExponentField:
    domain: object
    values: np.ndarray
    s_min: float
    s_max: float
    is_conjugate: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.domain.d

    @property
    def n_slabs(self):
        return self.values.shape[0]

    @property
    def s0(self):
        return pressure_exponent(self.d)

    @cached_property
    def conjugate(self):
        return conjugate_field(self)

    @cached_property
    def log_holder_C(self):
        """Max over slabs and grid pairs with 2h <= |x - y| <= 1/2 of -|s(x) - s(y)| log|x - y|."""
        return max(_log_holder_slab(self.domain, v) for v in self.values)

    def at_slab(self, k):
        return self.values[k]

    def at_time(self, t):
        return self.values[int(self.domain.slab_index(t))]

    def samples(self, samples):
        """Exponent per time sample, shape ``(len(samples), *grid)``."""
        return self.values[self.domain.slab_index(samples.times)]

    def is_constant(self):
        inside = self.values[:, self.domain.mask]
        return bool(np.ptp(inside) == 0.0)

    def to_csv(self):
        """One block per slab: ``# slab=k t0=.. t1=.. shape=..`` followed by row-major rows."""
        out = io.StringIO()
        edges = self.domain.slab_edges
        shape = self.domain.shape
        for k, v in enumerate(self.values):
            out.write(f"# slab={k} t0={edges[k]!r} t1={edges[k + 1]!r} shape={','.join(map(str, shape))}\n")
            np.savetxt(out, v.reshape(shape[0], -1), delimiter=",", fmt="%.17g")
        return out.getvalue()


def _log_holder_slab(domain, v):
    h, d = domain.h, domain.d
    m = domain.mask
    reach = int(np.floor(0.5 / h + 1e-9))
    best = 0.0
    ranges = [range(0, reach + 1)] + [range(-reach, reach + 1)] * (d - 1)
    for off in np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, d):
        # half-space of offsets; the other half repeats the same pairs
        nz = np.flatnonzero(off)
        if nz.size == 0 or off[nz[0]] < 0:
            continue
        dist = h * np.sqrt(float(off @ off))
        if dist < 2 * h - 1e-12 or dist > 0.5 + 1e-12:
            continue
        a = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, v.shape))
        b = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, v.shape))
        both = m[a] & m[b]
        if not both.any():
            continue
        diff = np.abs(v[a] - v[b])[both].max()
        best = max(best, -diff * np.log(dist))
    return float(best)


def make_exponent_field(domain, slab_values, s_max=None):
    """Validate per-slab exponent grids against the admissible range.

    ``slab_values`` is an array ``(n_slabs, *grid)``, a list of grids, or a
    list of constants.  Only cells inside the region are validated; the
    recorded ``s_min``/``s_max`` are the extremes there unless ``s_max`` is
    supplied as a larger cap.
    """
    items = list(slab_values)
    if len(items) != domain.n_slabs:
        raise DimensionError(f"expected {domain.n_slabs} slab grids, got {len(items)}")
    values = np.empty((domain.n_slabs,) + domain.shape)
    for k, item in enumerate(items):
        arr = np.asarray(item, dtype=float)
        if arr.ndim == 0:
            values[k] = arr
        elif arr.shape == domain.shape:
            values[k] = arr
        else:
            raise DimensionError(f"slab {k} has shape {arr.shape}, grid is {domain.shape}")
    inside = values[:, domain.mask]
    if not np.all(np.isfinite(inside)):
        raise DataError("exponent contains non-finite values")
    bound = lower_exponent_bound(domain.d)
    lo, hi = float(inside.min()), float(inside.max())
    if lo < bound - 1e-14:
        raise BoundsError(f"exponent minimum {lo:.6g} is below (3d+2)/(d+2) = {bound:.6g} for d={domain.d}")
    if s_max is None:
        s_max = hi
    elif s_max < hi:
        raise BoundsError(f"s_max={s_max} is below the exponent maximum {hi}")
    values = np.where(domain.mask[None], values, lo)
    values.setflags(write=False)
    return ExponentField(domain, values, lo, float(s_max), metadata={"holder_time_uniformity": "max over slabs"})


def conjugate_field(s):
    """Pointwise Hoelder conjugate s / (s - 1)."""
    vals = conjugate_exponent(s.values)
    vals.setflags(write=False)
    lo, hi = s.s_max / (s.s_max - 1.0), s.s_min / (s.s_min - 1.0)
    out = ExponentField(s.domain, vals, lo, hi, not s.is_conjugate, dict(s.metadata))
    if "conjugate" not in s.__dict__:
        out.__dict__["conjugate"] = s
    return out


def read_exponent_csv(text, domain, s_max=None):
    blocks, current = [], None
    for line in io.StringIO(text):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            current = []
            blocks.append(current)
        elif current is None:
            raise DataError("exponent CSV must start with a slab header")
        else:
            current.append([float(x) for x in line.split(",")])
    return make_exponent_field(domain, [np.asarray(b).reshape(domain.shape) for b in blocks], s_max)


# ------------------------------------------------------------ integration


def _prepare(g, s, samples):
    g = np.asarray(g, dtype=float)
    d = s.d
    if samples is None:
        samples = TimeSamples.per_slab(s.domain)
    if g.ndim < 1 + d or g.shape[0] != len(samples) or g.shape[1:1 + d] != s.domain.shape:
        raise DimensionError(
            f"field shape {g.shape} does not match ({len(samples)}, {s.domain.shape}, ...)"
        )
    mag = np.abs(g) if g.ndim == 1 + d else np.sqrt((g ** 2).reshape(g.shape[:1 + d] + (-1,)).sum(-1))
    exps = s.samples(samples)
    m = s.domain.mask
    weights = samples.weights[:, None] * s.domain.cell_volume
    return mag[:, m], exps[:, m], np.broadcast_to(weights, (len(samples), int(m.sum())))


def modular(g, s, samples=None):
    """Midpoint-rule integral of |g|^s over the region and the time samples."""
    mag, exps, w = _prepare(g, s, samples)
    return float((w * mag ** exps).sum())


def space_modular(g, s_grid, domain):
    """Spatial integral of |g|^s at one instant; ``s_grid`` is a grid or a constant."""
    g = np.asarray(g, dtype=float)
    mag = np.abs(g) if g.ndim == domain.d else np.sqrt((g ** 2).reshape(domain.shape + (-1,)).sum(-1))
    s_grid = np.broadcast_to(np.asarray(s_grid, dtype=float), domain.shape)
    m = domain.mask
    return float(domain.cell_volume * (mag[m] ** s_grid[m]).sum())


@dataclass(frozen=True)
class ModularReport:
    modular_value: float
    luxemburg_norm: float
    lambda_bracket: tuple
    iterations: int
    metadata: dict = field(default_factory=dict)


def _luxemburg(mag, exps, w, tol, max_iter=200):
    mag, exps, w = mag.ravel(), exps.ravel(), w.ravel()
    keep = (mag > 0) & (w > 0)
    if not keep.any():
        return 0.0, (0.0, 0.0), 0
    logg, e, logw = np.log(mag[keep]), exps[keep], np.log(w[keep])

    def log_rho(log_lam):
        return logsumexp(e * (logg - log_lam) + logw)

    total = np.exp(logsumexp(logw))
    gmax = logg.max()
    hi = gmax + max(np.log(total) / e.min(), np.log(total) / e.max())
    hi += 1e-12 + 1e-15 * abs(hi)
    lo = hi
    iterations = 0
    while log_rho(lo) <= 0.0:
        lo -= np.log(2.0)
        iterations += 1
        if iterations > max_iter:
            raise NumericalError(f"could not bracket the Luxemburg norm, bracket=({np.exp(lo)}, {np.exp(hi)})")
    while hi - lo > 4 * np.finfo(float).eps * max(1.0, abs(hi)) and iterations < max_iter:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if log_rho(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        iterations += 1
    lam = np.exp(hi)
    rho = np.exp(log_rho(hi))
    if abs(rho - 1.0) > tol:
        raise NumericalError(
            f"Luxemburg bisection ended with modular {rho!r} outside tolerance, "
            f"bracket=({np.exp(lo)!r}, {lam!r})"
        )
    return float(lam), (float(np.exp(lo)), float(lam)), iterations


def luxemburg_norm(g, s, tol=1e-10, samples=None):
    """Luxemburg norm of ``g`` in the variable-exponent space, by bracketing and bisection."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    mag, exps, w = _prepare(g, s, samples)
    lam, bracket, iters = _luxemburg(mag, exps, w, tol)
    meta = dict(s.metadata)
    meta["log_holder_C"] = "max over slabs"
    return ModularReport(float((w * mag ** exps).sum()), lam, bracket, iters, meta)


def space_luxemburg(g, s_grid, domain, tol=1e-10):
    """Luxemburg norm at one instant (``s_grid`` may be a constant)."""
    g = np.asarray(g, dtype=float)
    mag = np.abs(g) if g.ndim == domain.d else np.sqrt((g ** 2).reshape(domain.shape + (-1,)).sum(-1))
    s_grid = np.broadcast_to(np.asarray(s_grid, dtype=float), domain.shape)
    m = domain.mask
    w = np.full(int(m.sum()), domain.cell_volume)
    return _luxemburg(mag[m], s_grid[m], w, tol)[0]


HOLDER_CONSTANT = 2.0


def holder_pairing(phi, psi, s, samples=None):
    """Space-time integral of ``phi * psi`` (contracted over component axes)."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if phi.shape != psi.shape:
        raise DimensionError(f"pairing shapes differ: {phi.shape} vs {psi.shape}")
    if samples is None:
        samples = TimeSamples.per_slab(s.domain)
    d = s.d
    if phi.shape[0] != len(samples) or phi.shape[1:1 + d] != s.domain.shape:
        raise DimensionError(f"field shape {phi.shape} does not match the space-time grid")
    prod = (phi * psi).reshape(phi.shape[:1 + d] + (-1,)).sum(-1)
    m = s.domain.mask
    return float((samples.weights * prod[:, m].sum(axis=1)).sum() * s.domain.cell_volume)


def holder_bound(phi, psi, s, samples=None, tol=1e-10):
    """Right-hand side ``2 ||phi||_s ||psi||_{s'}`` of the generalized Hoelder inequality."""
    a = luxemburg_norm(phi, s, tol, samples).luxemburg_norm
    b = luxemburg_norm(psi, s.conjugate, tol, samples).luxemburg_norm
    return HOLDER_CONSTANT * a * b
