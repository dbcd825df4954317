"""Free-space pressure solves, the ball-localized pressure decomposition and
the harmonic remainder.

Source fields may be given in two layouts:

* ``cell``: every tensor/vector component at cell centers, differentiated
  with centered differences (or spectrally with the continuum kernel);
* ``mac``: diagonal tensor components at centers and off-diagonal ones on the
  grid lines shared by the two axes (nodes in 2-D); vector component k on the
  faces normal to axis k.  This matches the staggered solver exactly.

Free-space solutions are returned on the grid enlarged by ``pad`` cells on
each side.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DecompositionError, DimensionError
from .greens import far_field_div, far_field_divdiv, lattice_solve, spectral_solver


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Symmetric tensor field stored by independent components ``{(i, j): array}``, i <= j."""

    comps: dict
    layout: str
    grid: tuple

    @property
    def d(self):
        return len(self.grid)

    @classmethod
    def from_array(cls, a):
        """Cell-layout tensor from an array of shape ``(d, d, *grid)``."""
        a = np.asarray(a, dtype=float)
        d = a.shape[0]
        comps = {(i, j): a[i, j] for i in range(d) for j in range(i, d)}
        return cls(comps, "cell", a.shape[2:])

    def to_array(self):
        if self.layout != "cell":
            raise ConfigurationError("only cell-layout tensors convert to dense arrays")
        d = self.d
        out = np.empty((d, d) + tuple(self.grid))
        for (i, j), c in self.comps.items():
            out[i, j] = c
            out[j, i] = c
        return out

    def scaled(self, center_weight, line_weights=None):
        """Multiply by a scalar field given at centers (and on the off-diagonal grids for ``mac``)."""
        comps = {}
        for (i, j), c in self.comps.items():
            if i == j or self.layout == "cell":
                comps[(i, j)] = c * center_weight
            else:
                comps[(i, j)] = c * line_weights[(i, j)]
        return SymTensor(comps, self.layout, self.grid)

    def __add__(self, other):
        if other.layout != self.layout:
            raise ConfigurationError("cannot add tensors in different layouts")
        return SymTensor({k: c + other.comps[k] for k, c in self.comps.items()}, self.layout, self.grid)

    def __mul__(self, scalar):
        return SymTensor({k: c * scalar for k, c in self.comps.items()}, self.layout, self.grid)

    __rmul__ = __mul__


def _embed(a, offsets, size):
    out = np.zeros(size)
    out[tuple(slice(o, o + n) for o, n in zip(offsets, a.shape))] = a
    return out


def divdiv_source(g, h):
    """Discrete div div g on the grid enlarged by one cell per side."""
    d, n = g.d, tuple(g.grid)
    out = np.zeros(tuple(k + 2 for k in n))
    big = tuple(k + 4 for k in n)
    win = tuple(slice(1, -1) for _ in n)
    for (i, j), c in g.comps.items():
        if i == j:
            e = _embed(c, (2,) * d, big)
            out += (np.roll(e, -1, i) - 2 * e + np.roll(e, 1, i))[win] / h ** 2
        elif g.layout == "cell":
            e = _embed(c, (2,) * d, big)
            mixed = np.roll(np.roll(e, -1, i), -1, j) - np.roll(np.roll(e, -1, i), 1, j)
            mixed = mixed - np.roll(np.roll(e, 1, i), -1, j) + np.roll(np.roll(e, 1, i), 1, j)
            out += 2 * mixed[win] / (4 * h * h)
        else:
            size = tuple(k + 3 if a in (i, j) else k + 2 for a, k in enumerate(n))
            e = _embed(c, (1,) * d, size)
            e = np.diff(np.diff(e, axis=i), axis=j)
            out += 2 * e / (h * h)
    return out


def div_source(f, h, layout="cell"):
    """Discrete div f on the grid enlarged by one cell per side.

    ``f`` is an array ``(d, *grid)`` for the cell layout or a sequence of
    face arrays for the ``mac`` layout.
    """
    if layout == "cell":
        f = np.asarray(f, dtype=float)
        d, n = f.shape[0], f.shape[1:]
        big = tuple(k + 4 for k in n)
        win = tuple(slice(1, -1) for _ in n)
        out = np.zeros(tuple(k + 2 for k in n))
        for i in range(d):
            e = _embed(f[i], (2,) * d, big)
            out += (np.roll(e, -1, i) - np.roll(e, 1, i))[win] / (2 * h)
        return out
    d = len(f)
    n = tuple(s - (1 if a == 0 else 0) for a, s in enumerate(np.shape(f[0])))
    out = np.zeros(tuple(k + 2 for k in n))
    for i, comp in enumerate(f):
        size = tuple(k + 3 if a == i else k + 2 for a, k in enumerate(n))
        out += np.diff(_embed(np.asarray(comp, float), (1,) * d, size), axis=i) / h
    return out


def _pad_window(src, pad):
    """Place a one-cell-padded source inside the requested output window."""
    if pad < 1:
        raise ConfigurationError("pad must be at least one cell (stencils reach one cell outside)")
    return np.pad(src, pad - 1)


def _default_method(d):
    return "lattice" if d == 2 else "spectral"


def freespace_poisson_divdiv(g, h, pad=1, method=None):
    """Decaying solution of -Lap u = div div g, on the grid enlarged by ``pad`` cells per side.

    ``method="lattice"`` inverts the discrete 5-point Laplacian exactly (2-D);
    ``method="spectral"`` inverts the continuum Laplacian (cell layout only).
    """
    if not isinstance(g, SymTensor):
        g = SymTensor.from_array(g)
    method = method or _default_method(g.d)
    if method == "lattice":
        if g.d != 2:
            raise DimensionError("the lattice kernel is available in 2-D only")
        return lattice_solve(_pad_window(divdiv_source(g, h), pad), h)
    if method == "spectral":
        if g.layout != "cell":
            raise ConfigurationError("the spectral kernel needs cell-layout sources")
        a = np.pad(g.to_array(), [(0, 0), (0, 0)] + [(pad, pad)] * g.d)
        return spectral_solver(a.shape[2:], h).divdiv(a)
    raise ConfigurationError(f"unknown free-space method {method!r}")


def freespace_poisson_div(f, h, pad=1, method=None, layout="cell"):
    """Decaying solution of -Lap u = div f (see :func:`freespace_poisson_divdiv`)."""
    d = len(f) if layout == "mac" else np.shape(f)[0]
    method = method or _default_method(d)
    if method == "lattice":
        if d != 2:
            raise DimensionError("the lattice kernel is available in 2-D only")
        return lattice_solve(_pad_window(div_source(f, h, layout), pad), h)
    if method == "spectral":
        if layout != "cell":
            raise ConfigurationError("the spectral kernel needs cell-layout sources")
        a = np.pad(np.asarray(f, float), [(0, 0)] + [(pad, pad)] * d)
        return spectral_solver(a.shape[1:], h).div(a)
    raise ConfigurationError(f"unknown free-space method {method!r}")


def crop(u, pad, d=2):
    """Restrict a padded free-space solution (last ``d`` axes) to the original grid."""
    return u[(Ellipsis,) + (slice(pad, -pad),) * d] if pad else u


def lp_norm(a, p, h):
    a = np.asarray(a, dtype=float)
    return float((np.abs(a) ** p).sum() * h ** a.ndim) ** (1.0 / p)


def stability_ratio(u, g, p, h):
    """||u||_p / ||g||_p with |g| the Frobenius norm of a dense tensor field ``(d, d, *grid)``."""
    g = np.asarray(g, dtype=float)
    mag = np.sqrt((g ** 2).reshape((-1,) + g.shape[-(g.ndim - 2):]).sum(0))
    return lp_norm(u, p, h) / lp_norm(mag, p, h)


# ----------------------------------------------------------- decay checks


def ray_profile(values, center, h, radii, n_rays=64):
    """Max of |values| over ``n_rays`` equally spaced directions at each radius (2-D, bilinear)."""
    from scipy.ndimage import map_coordinates

    ang = 2 * np.pi * (np.arange(n_rays) + 0.5) / n_rays
    out = []
    for r in radii:
        pts = np.stack([center[0] + r / h * np.cos(ang), center[1] + r / h * np.sin(ang)])
        out.append(np.abs(map_coordinates(values, pts, order=1)).max())
    return np.asarray(out)


def loglog_slope(radii, values):
    return float(np.polyfit(np.log(radii), np.log(values), 1)[0])


def ray_points(d, radii, n_rays, seed=0):
    """Points at the given radii along fixed pseudo-random unit directions."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_rays, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(radii)[:, None, None] * dirs[None]


def far_field_slope_divdiv(g, centers, h, radii, n_rays=16, seed=0):
    """Log-log slope of the ray-maximum of the direct-sum far field of div div g."""
    pts = ray_points(centers.shape[1], radii, n_rays, seed)
    prof = [np.abs(far_field_divdiv(g, p, centers, h)).max() for p in pts]
    return loglog_slope(radii, prof)


def far_field_slope_div(f, centers, h, radii, n_rays=16, seed=0):
    pts = ray_points(centers.shape[1], radii, n_rays, seed)
    prof = [np.abs(far_field_div(f, p, centers, h)).max() for p in pts]
    return loglog_slope(radii, prof)


# ---------------------------------------------------------- decomposition


@dataclass(frozen=True, eq=False)
class PressureBundle:
    """Per-step pressure parts on the original grid.

    ``p1``/``p2`` have one field per ball; ``total`` is the sum of all
    free-space parts, so the physical pressure is ``ph / dt`` increments
    minus ``total`` (see the solver).
    """

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray
    ph: np.ndarray = None
    norms: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.p1.sum(axis=0) + self.p2.sum(axis=0) + self.p3 + self.p4

    def with_harmonic(self, ph):
        return PressureBundle(self.p1, self.p2, self.p3, self.p4, ph, dict(self.norms))


def localization_weights(cov, grid_points, line_points):
    """Partition weights at centers ``(N, *grid)`` and on each off-diagonal grid ``{(i, j): (N, ...)}``."""
    centers = cov.weights_at(grid_points)
    lines = {k: cov.weights_at(p) for k, p in line_points.items()}
    return centers, lines


def pressure_bundle(alpha, theta_beta, uu, f, cov, h, *, weights=None, grid_points=None, line_points=None,
                    f_layout=None, method=None):
    """Localized free-space pressures for one time step.

    ``alpha`` is localized by the partition of unity ``cov`` into ``p1``,
    ``uu`` (the convective flux) into ``p2``; ``f`` gives ``p3`` and
    ``theta_beta`` gives ``p4``.  Tensors are :class:`SymTensor` (or dense
    cell-layout arrays).  Localization weights are taken from ``weights`` or
    evaluated from the covering at ``grid_points`` / ``line_points``.
    """
    alpha, theta_beta, uu = (t if isinstance(t, SymTensor) else SymTensor.from_array(t) for t in (alpha, theta_beta, uu))
    f_layout = f_layout or alpha.layout
    if weights is None:
        weights = localization_weights(cov, grid_points, line_points or {})
    wc, wl = weights
    n = wc.shape[0]
    d = alpha.d

    def localized(t):
        return [t.scaled(wc[k], {key: v[k] for key, v in wl.items()}) for k in range(n)]

    # batch the per-ball solves through one transform where possible
    def solve_many(tensors):
        if (method or _default_method(d)) == "lattice":
            src = np.stack([_pad_window(divdiv_source(t, h), 1) for t in tensors])
            return crop(lattice_solve(src, h), 1, d)
        return np.stack([crop(freespace_poisson_divdiv(t, h, 1, method), 1, d) for t in tensors])

    p1 = solve_many(localized(alpha))
    p2 = -solve_many(localized(uu))
    p3 = crop(freespace_poisson_div(f, h, 1, method, f_layout), 1, d)
    p4 = crop(freespace_poisson_divdiv(theta_beta, h, 1, method), 1, d)
    return PressureBundle(p1, p2, p3, p4)


def norms_csv(rows):
    """CSV of per-step pressure norms; ``rows`` are dicts with the same keys."""
    out = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return out.getvalue()


@dataclass(frozen=True)
class HarmonicPressure:
    values: np.ndarray
    misfit: float
    mean: float


def harmonic_pressure(residual, grid, tol=1e-8):
    """Zero-mean ``p`` whose discrete gradient best matches a face residual.

    ``residual`` is given on the free faces of the staggered ``grid``.  The
    part orthogonal to gradients (the misfit) must vanish up to ``tol``
    relative to the residual, otherwise :class:`DecompositionError` is raised.
    """
    residual = np.asarray(residual, dtype=float)
    scale = np.linalg.norm(residual)
    if scale == 0.0:
        return HarmonicPressure(np.zeros((grid.nx, grid.ny)), 0.0, 0.0)
    p = grid.solve_neumann(grid.D @ residual)
    misfit = float(np.linalg.norm(grid.G @ p - residual) / scale)
    if misfit > tol:
        raise DecompositionError(f"residual is not a discrete gradient (relative misfit {misfit:.3e})", misfit)
    p = p.reshape(grid.nx, grid.ny)
    return HarmonicPressure(p, misfit, float(p.mean()))


def interior_laplacian(p, h, margin=1):
    """5-point Laplacian of a 2-D cell field, skipping ``margin`` layers of cells along the walls."""
    lap = (p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2] - 4 * p[1:-1, 1:-1]) / h ** 2
    k = margin - 1
    return lap[k: lap.shape[0] - k, k: lap.shape[1] - k] if k > 0 else lap
