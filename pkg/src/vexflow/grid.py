"""Uniform space-time grids, exponent-adapted ball coverings and partitions of unity.

Cells are indexed ``[i, j(, k)]`` with axis 0 along x; cell ``i`` has its
center at ``origin + (i + 1/2) h``.  Every array that lives on the grid has
``domain.shape`` as its spatial shape.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, CoverageError, DegenerateDomainError, ResolutionError


@dataclass(frozen=True, eq=False)
class Domain:
    extents: tuple
    shape: tuple
    h: float
    mask: np.ndarray
    T: float
    slab_edges: tuple
    boundary_flags: dict = field(default_factory=dict)
    origin: tuple = None

    def __post_init__(self):
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0,) * len(self.shape))
        self.mask.setflags(write=False)

    @property
    def d(self):
        return len(self.shape)

    @property
    def n_cells(self):
        return int(self.mask.sum())

    @property
    def cell_volume(self):
        return self.h ** self.d

    @property
    def measure(self):
        return self.n_cells * self.cell_volume

    @property
    def n_slabs(self):
        return len(self.slab_edges) - 1

    @property
    def slab_lengths(self):
        return np.diff(np.asarray(self.slab_edges))

    @property
    def is_box(self):
        return bool(self.mask.all())

    @cached_property
    def axes(self):
        return tuple(o + self.h * (np.arange(n) + 0.5) for o, n in zip(self.origin, self.shape))

    def mesh(self):
        return np.meshgrid(*self.axes, indexing="ij")

    @cached_property
    def diameter(self):
        return float(np.sqrt(sum(e * e for e in self.extents)))

    @cached_property
    def boundary_distance(self):
        """Distance from each cell center to the boundary of the region (0 outside)."""
        if self.is_box:
            dist = np.full(self.shape, np.inf)
            for axis, (x, o, e) in enumerate(zip(self.axes, self.origin, self.extents)):
                along = np.minimum(x - o, o + e - x)
                view = [1] * self.d
                view[axis] = -1
                dist = np.minimum(dist, along.reshape(view))
            return dist
        padded = np.pad(self.mask, 1, constant_values=False)
        edt = ndimage.distance_transform_edt(padded, sampling=self.h)[(slice(1, -1),) * self.d]
        return np.where(self.mask, edt - 0.5 * self.h, 0.0)

    def slab_index(self, t):
        """Slab containing time ``t`` (slabs are closed on the left)."""
        k = np.searchsorted(np.asarray(self.slab_edges), t, side="right") - 1
        return np.clip(k, 0, self.n_slabs - 1)

    def masked(self, values):
        """Zero-extend a field (spatial axes leading) outside the region."""
        values = np.asarray(values, dtype=float)
        m = self.mask.reshape(self.mask.shape + (1,) * (values.ndim - self.d))
        return np.where(m, values, 0.0)


def _slab_edges(slabs, T):
    if slabs is None:
        return (0.0, float(T))
    slabs = list(slabs)
    if not slabs:
        raise ConfigurationError("at least one time slab is required")
    if np.ndim(slabs[0]) == 1:
        edges = [float(slabs[0][0])]
        for a, b in slabs:
            if not np.isclose(a, edges[-1], rtol=0, atol=1e-12):
                raise ConfigurationError(f"time slabs leave a gap or overlap at t={a}")
            edges.append(float(b))
    else:
        edges = [float(e) for e in slabs]
    edges = np.asarray(edges)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("time slab edges must be strictly increasing")
    if abs(edges[0]) > 1e-12 or abs(edges[-1] - T) > 1e-12 * max(1.0, T):
        raise ConfigurationError(f"time slabs must partition [0, {T}]")
    edges[0], edges[-1] = 0.0, float(T)
    return tuple(edges.tolist())


def build_domain(extents, resolution, *, T=1.0, slabs=None, mask="box", origin=None):
    """Build a uniform grid on a box, optionally restricted by a mask.

    ``resolution`` is either the number of cells along the first axis (the
    other axes follow from the common spacing) or one count per axis.
    ``mask`` may be ``"box"``, ``"ball"`` (inscribed ellipsoid), a boolean
    array, or a callable receiving the coordinate meshes.
    """
    extents = tuple(float(e) for e in extents)
    d = len(extents)
    if d not in (2, 3):
        raise ConfigurationError(f"dimension must be 2 or 3, got {d}")
    if min(extents) <= 0:
        raise ConfigurationError("box extents must be positive")
    if not T > 0:
        raise ConfigurationError("final time T must be positive")
    counts = np.atleast_1d(np.asarray(resolution))
    if counts.size not in (1, d) or np.any(counts <= 0) or np.any(counts != np.round(counts)):
        raise ConfigurationError(f"resolution must be positive integers, got {resolution}")
    h = extents[0] / int(counts[0])
    if counts.size == 1:
        shape = tuple(int(round(e / h)) for e in extents)
    else:
        shape = tuple(int(c) for c in counts)
    for e, n in zip(extents, shape):
        if n <= 0 or abs(n * h - e) > 1e-9 * e:
            raise ConfigurationError("extents are not commensurate with a uniform spacing")
    origin = tuple(float(o) for o in origin) if origin is not None else (0.0,) * d
    axes = [o + h * (np.arange(n) + 0.5) for o, n in zip(origin, shape)]
    X = np.meshgrid(*axes, indexing="ij")
    if isinstance(mask, str):
        if mask == "box":
            m = np.ones(shape, dtype=bool)
        elif mask == "ball":
            m = sum(((x - o - e / 2) / (e / 2)) ** 2 for x, o, e in zip(X, origin, extents)) < 1.0
        else:
            raise ConfigurationError(f"unknown mask rule {mask!r}")
    elif callable(mask):
        m = np.asarray(mask(*X), dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ConfigurationError(f"mask shape {m.shape} does not match grid {shape}")
    if not m.any():
        raise DegenerateDomainError("mask selects no cells")
    _, n_parts = ndimage.label(m)
    if n_parts != 1:
        raise DegenerateDomainError(f"mask has {n_parts} connected components")
    walls = {f"{side}{axis}": "no-slip" for axis in range(d) for side in ("lo", "hi")}
    return Domain(extents, shape, h, m.copy(), float(T), _slab_edges(slabs, T), walls, origin)


# ---------------------------------------------------------------- covering


@dataclass(frozen=True, eq=False)
class Covering:
    """Balls of a common radius with per-ball, per-slab exponent bounds.

    ``low``/``high`` hold the infimum/supremum of the exponent over the
    doubled ball and ``lifted`` the improved integrability ``low (1 + 2/d)``;
    each has shape ``(n_balls, n_slabs)``.
    """

    r: float
    centers: np.ndarray
    low: np.ndarray
    high: np.ndarray
    lifted: np.ndarray
    threshold: float
    zeta: np.ndarray = None

    @property
    def n_balls(self):
        return len(self.centers)

    def bump_at(self, points):
        """Unnormalized smooth bumps at ``points`` (shape ``(..., d)``) -> ``(N, ...)``."""
        points = np.asarray(points, dtype=float)
        d = points.shape[-1]
        rho = np.linalg.norm(points[None] - self.centers.reshape((-1,) + (1,) * (points.ndim - 1) + (d,)), axis=-1)
        return _indicator_profile(d)(rho / self.r)

    def weights_at(self, points):
        """Partition-of-unity weights at arbitrary points; columns sum to one where covered."""
        bumps = self.bump_at(points)
        total = bumps.sum(axis=0)
        if np.any(total <= 0):
            raise CoverageError("point outside every ball of the covering")
        return bumps / total

    def to_csv(self):
        d = self.centers.shape[1]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        n_slabs = self.low.shape[1]
        head = ["ball"] + [f"x{k}" for k in range(d)] + ["radius"]
        for k in range(n_slabs):
            head += [f"s_low_{k}", f"s_high_{k}", f"s_lifted_{k}"]
        w.writerow(head)
        for i, c in enumerate(self.centers):
            row = [i] + [repr(float(v)) for v in c] + [repr(float(self.r))]
            for k in range(n_slabs):
                row += [repr(float(self.low[i, k])), repr(float(self.high[i, k])), repr(float(self.lifted[i, k]))]
            w.writerow(row)
        return out.getvalue()


def _disk_footprint(radius_cells, d):
    m = int(np.floor(radius_cells + 1e-9))
    g = np.arange(-m, m + 1)
    G = np.meshgrid(*([g] * d), indexing="ij")
    return sum(a * a for a in G) <= radius_cells ** 2 + 1e-9


def _candidate_distances(max_cells, d):
    """Distinct lengths |k| of integer vectors up to ``max_cells``, ascending."""
    m = int(np.ceil(max_cells))
    g = np.arange(0, m + 1)
    G = np.meshgrid(*([g] * d), indexing="ij")
    sq = np.unique(sum(a * a for a in G).ravel())
    dist = np.sqrt(sq)
    return dist[dist <= max_cells + 1e-9]


def ball_oscillation(domain, slab_values, reach):
    """Largest oscillation of each slab over Omega-restricted balls of radius ``reach``.

    Balls are centered at every cell center of the bounding box.
    """
    fp = _disk_footprint(reach / domain.h, domain.d)
    worst = 0.0
    for s in slab_values:
        hi = ndimage.maximum_filter(np.where(domain.mask, s, -np.inf), footprint=fp, mode="constant", cval=-np.inf)
        lo = ndimage.minimum_filter(np.where(domain.mask, s, np.inf), footprint=fp, mode="constant", cval=np.inf)
        seen = np.isfinite(hi)
        if seen.any():
            worst = max(worst, float((hi - lo)[seen].max()))
    return worst


def covering_admissible(domain, slab_values, r, threshold):
    """Whether every ball of radius 2r (centered anywhere in the box) sees oscillation <= threshold.

    Half a cell diagonal is added to the reach so that balls centered off the
    cell lattice are dominated by a ball around the nearest cell center.
    """
    reach = 2.0 * r + 0.5 * domain.h * np.sqrt(domain.d)
    return ball_oscillation(domain, slab_values, reach) <= threshold + 1e-12


def candidate_radii(domain):
    """Radii at which the admissibility test can change, within [2h, diam]."""
    slack = 0.5 * np.sqrt(domain.d)
    dist = _candidate_distances(domain.diameter / domain.h + slack + 1, domain.d)
    radii = 0.5 * (dist - slack) * domain.h
    return radii[(radii >= 2 * domain.h - 1e-12) & (radii <= domain.diameter)]


def _lattice_centers(domain, r):
    per_axis = []
    for o, e in zip(domain.origin, domain.extents):
        m = max(1, int(np.ceil(e / r - 1e-12)))
        start = o + 0.5 * (e - (m - 1) * r)
        per_axis.append(start + r * np.arange(m))
    C = np.stack([c.ravel() for c in np.meshgrid(*per_axis, indexing="ij")], axis=-1)
    return C


def build_covering(domain, s):
    """Cover the region by balls of one radius on which the exponent oscillates little.

    ``s`` is an exponent field (anything with ``values`` of shape
    ``(n_slabs, *domain.shape)``).  The radius is the largest candidate in
    ``[2h, diam]`` passing :func:`covering_admissible`, found by bisection
    over the sorted candidate list (after a galloping search for the bracket).
    """
    values = np.asarray(s.values)
    threshold = s.s_min / domain.d
    glob = max(float(v[domain.mask].max() - v[domain.mask].min()) for v in values)
    if glob <= threshold + 1e-12:
        r = domain.diameter
    else:
        radii = candidate_radii(domain)
        if radii.size == 0 or not covering_admissible(domain, values, radii[0], threshold):
            raise ResolutionError("no admissible covering radius of at least two cells")
        # gallop upward first so the expensive wide-footprint scans stay near the answer
        lo, step, hi = 0, 1, None
        while hi is None:
            probe = lo + step
            if probe >= len(radii) - 1:
                probe = len(radii) - 1
                if covering_admissible(domain, values, radii[probe], threshold):
                    lo = hi = probe
                else:
                    hi = probe
            elif covering_admissible(domain, values, radii[probe], threshold):
                lo, step = probe, 2 * step
            else:
                hi = probe
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if covering_admissible(domain, values, radii[mid], threshold):
                lo = mid
            else:
                hi = mid
        r = float(radii[lo])
    return _covering_for_radius(domain, values, r, threshold, s.s_min)


def _covering_for_radius(domain, values, r, threshold, s_min):
    d = domain.d
    X = np.stack(domain.mesh(), axis=-1)[domain.mask]
    centers = _lattice_centers(domain, r)
    dist = np.linalg.norm(X[None, :, :] - centers[:, None, :], axis=-1)
    keep = (dist < r).any(axis=1)
    centers, dist = centers[keep], dist[keep]
    if not (dist < r).any(axis=0).all():
        raise CoverageError("lattice of balls leaves cells uncovered")
    near = dist <= 2 * r
    inside = values[:, domain.mask]
    low = np.empty((len(centers), len(values)))
    high = np.empty_like(low)
    for i in range(len(centers)):
        sel = inside[:, near[i]]
        low[i], high[i] = sel.min(axis=1), sel.max(axis=1)
    lifted = low * (1.0 + 2.0 / d)
    if np.any(low < s_min - 1e-12) or np.any(lifted - high < threshold - 1e-9):
        raise ResolutionError("covering violates the exponent bound chain")
    return Covering(float(r), centers, low, high, lifted, threshold)


@lru_cache(maxsize=None)
def _indicator_profile(d):
    """Radial profile (argument rho/r) of the indicator of B_{3r/4} mollified at width r/4."""
    t, w = np.polynomial.legendre.leggauss(400)
    t, w = 0.5 * (t + 1), 0.5 * w
    eta = np.exp(-1.0 / (1.0 - t * t)) * t ** (d - 1) * w
    rho = np.linspace(0.0, 1.0, 2049)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (9 / 16 - t[None] ** 2 / 16 - rho[:, None] ** 2) / (0.5 * rho[:, None] * t[None])
    a = np.where(np.isnan(a), 1.0, np.clip(a, -1.0, 1.0))
    frac = 1.0 - np.arccos(a) / np.pi if d == 2 else 0.5 * (1.0 + a)
    table = frac @ eta / eta.sum()
    table[-1] = 0.0

    def profile(x):
        return np.where(x < 1.0, np.interp(x, rho, table), 0.0)

    return profile


def partition_of_unity(cov, domain):
    """Attach normalized bumps ``zeta`` of shape ``(N, *domain.shape)``; zero outside the region."""
    X = np.stack(domain.mesh(), axis=-1)
    bumps = cov.bump_at(X)
    total = bumps.sum(axis=0)
    if np.any(total[domain.mask] <= 0):
        raise CoverageError("a cell of the region lies outside every ball")
    zeta = np.where(domain.mask[None], bumps / np.where(total > 0, total, 1.0), 0.0)
    return Covering(cov.r, cov.centers, cov.low, cov.high, cov.lifted, cov.threshold, zeta)


# ------------------------------------------------------------------- Korn


def _bubble_factor(x, L, k, phase):
    """(f, f', f'') for f(x) = (x (L - x))^2 cos(k pi x / L + phase)."""
    p = (x * (L - x)) ** 2
    p1 = 2 * x * (L - x) * (L - 2 * x)
    p2 = 2 * (L - 2 * x) ** 2 - 4 * x * (L - x)
    w = k * np.pi / L
    g, g1, g2 = np.cos(w * x + phase), -w * np.sin(w * x + phase), -w * w * np.cos(w * x + phase)
    return p * g, p1 * g + p * g1, p2 * g + 2 * p1 * g1 + p * g2


def _random_potential(rng, domain, n_terms=3, kmax=3):
    """Sum of separable bubble-trig terms; returns a function of a derivative multi-index."""
    d = domain.d
    coords = [x - o for x, o in zip(domain.axes, domain.origin)]
    terms = []
    for _ in range(n_terms):
        a = rng.standard_normal()
        facs = [_bubble_factor(coords[i], domain.extents[i], rng.integers(0, kmax + 1), rng.uniform(0, 2 * np.pi))
                for i in range(d)]
        terms.append((a, facs))

    def deriv(orders):
        out = 0.0
        for a, facs in terms:
            prod = a
            for i, f in enumerate(facs):
                view = [1] * d
                view[i] = -1
                prod = prod * f[orders[i]].reshape(view)
            out = out + prod
        return out

    return deriv


def _unit(d, *axes):
    o = [0] * d
    for a in axes:
        o[a] += 1
    return o


def _korn_sample(rng, domain, divergence_free):
    """Velocity (d, *shape) and gradient (d, d, *shape) with ``grad[k, j] = d_j u_k``."""
    d = domain.d
    if d == 2 and divergence_free:
        chi = _random_potential(rng, domain)
        u = np.stack([chi(_unit(2, 1)), -chi(_unit(2, 0))])
        grad = np.stack([
            np.stack([chi(_unit(2, j, 1)) for j in range(2)]),
            np.stack([-chi(_unit(2, j, 0)) for j in range(2)]),
        ])
        return u, grad
    if divergence_free:
        A = [_random_potential(rng, domain) for _ in range(3)]
        eps = {(0, 1, 2): 1, (1, 2, 0): 1, (2, 0, 1): 1, (0, 2, 1): -1, (2, 1, 0): -1, (1, 0, 2): -1}
        u = np.zeros((3,) + domain.shape)
        grad = np.zeros((3, 3) + domain.shape)
        for (k, i, j), sgn in eps.items():
            u[k] += sgn * A[j](_unit(3, i))
            for l in range(3):
                grad[k, l] += sgn * A[j](_unit(3, l, i))
        return u, grad
    comps = [_random_potential(rng, domain) for _ in range(d)]
    u = np.stack([c([0] * d) for c in comps])
    grad = np.stack([np.stack([c(_unit(d, j)) for j in range(d)]) for c in comps])
    return u, grad


def korn_constant_estimate(domain, q, n_samples=32, *, seed=0, divergence_free=False):
    """Empirical lower bound of the Korn constant in L^q over random zero-trace fields.

    Returns ``max ||grad u||_q / (||Du||_q + ||u||_2)`` over the samples;
    identically vanishing samples are skipped.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    m = domain.mask
    vol = domain.cell_volume
    best = 0.0
    for _ in range(n_samples):
        u, grad = _korn_sample(rng, domain, divergence_free)
        sym = 0.5 * (grad + np.swapaxes(grad, 0, 1))
        g_abs = np.sqrt((grad ** 2).sum(axis=(0, 1)))[m]
        s_abs = np.sqrt((sym ** 2).sum(axis=(0, 1)))[m]
        u_l2 = np.sqrt(vol * (u ** 2).sum(axis=0)[m].sum())
        num = (vol * (g_abs ** q).sum()) ** (1 / q)
        den = (vol * (s_abs ** q).sum()) ** (1 / q) + u_l2
        if den == 0.0:
            continue
        best = max(best, num / den)
    return best
