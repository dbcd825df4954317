"""Free-space inverses of the Laplacian.

Two kernels are provided:

* the lattice Green's function of the 5-point Laplacian in 2-D, which inverts
  the discrete operator exactly on the infinite lattice, and
* a truncated Newtonian kernel applied spectrally, which inverts the
  continuum Laplacian for sources given at cell centers (2-D and 3-D).

Both return decaying solutions without boundary conditions on any box.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import fft, special

from .errors import DimensionError


@lru_cache(maxsize=8)
def lattice_green_table(M, n_gauss=32):
    """G[m, n] for 0 <= m, n <= M with -Lap_1 G = delta, normalized by G[0, 0] = 0.

    The integral representation
    ``G(m, n) = (1/2pi) int_0^pi [expm1(-|m| s) cos(n t) - 2 sin^2(n t / 2)] / sinh(s) dt``
    with ``cosh s = 2 - cos t`` is evaluated by Gauss-Legendre on dyadic panels
    refined towards t = 0, written so that nothing cancels catastrophically.
    """
    levels = int(np.ceil(np.log2(np.pi * max(M, 1) * 100))) + 1
    edges = np.pi / 2.0 ** np.arange(levels + 1)
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    nodes, weights = [], []
    for a, b in zip(edges[1:], edges[:-1]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    b = edges[-1]
    nodes.append(0.5 * b * (x + 1))
    weights.append(0.5 * b * w)
    t = np.concatenate(nodes)
    wt = np.concatenate(weights)
    xx = 2 * np.sin(t / 2) ** 2
    sh = np.sqrt(xx * (xx + 2))
    s = np.log1p(xx + sh)
    G = np.zeros((M + 1, M + 1))
    for m in range(M + 1):
        n = np.arange(m + 1)
        nt = np.outer(n, t)
        num = np.expm1(-m * s)[None, :] * np.cos(nt) - 2 * np.sin(nt / 2) ** 2
        vals = (num / sh) @ wt / (2 * np.pi)
        G[m, : m + 1] = vals
        G[: m + 1, m] = vals
    G.setflags(write=False)
    return G


@lru_cache(maxsize=16)
def _lattice_kernel_fft(shape):
    nx, ny = shape
    table = lattice_green_table(max(nx, ny))
    ix = np.abs(np.arange(-(nx - 1), nx))
    iy = np.abs(np.arange(-(ny - 1), ny))
    full = table[np.ix_(ix, iy)]
    size = tuple(fft.next_fast_len(3 * n - 2) for n in shape)
    return fft.rfftn(full, s=size), size


def lattice_solve(source, h):
    """Solve -Lap_h u = source on the infinite 2-D lattice; output on the source window.

    ``source`` may carry leading batch axes; the last two axes are the grid.
    """
    source = np.asarray(source, dtype=float)
    if source.ndim < 2:
        raise DimensionError("lattice solve needs a 2-D grid")
    shape = source.shape[-2:]
    kern, size = _lattice_kernel_fft(shape)
    spec = fft.rfftn(source, s=size, axes=(-2, -1))
    full = fft.irfftn(spec * kern, s=size, axes=(-2, -1))
    nx, ny = shape
    return h * h * full[..., nx - 1 : 2 * nx - 1, ny - 1 : 2 * ny - 1]


def truncated_kernel_hat(k, R, d):
    """Fourier transform of the Newtonian potential cut off at radius R (exact, smooth in k)."""
    k = np.asarray(k, dtype=float)
    x = k * R
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    if d == 2:
        out = R * R * ((1 - special.j0(xs)) / xs ** 2 - np.log(R) * special.j1(xs) / xs)
        xsm = x[small]
        out[small] = R * R * (0.25 - xsm ** 2 / 64 - np.log(R) * (0.5 - xsm ** 2 / 16))
    elif d == 3:
        out = R * R * (1 - np.cos(xs)) / xs ** 2
        out[small] = R * R * (0.5 - x[small] ** 2 / 24)
    else:
        raise DimensionError(f"unsupported dimension {d}")
    return out


class SpectralSolver:
    """Continuum free-space solves for sources on a cell-centered window.

    The Newtonian kernel truncated beyond the window diameter agrees with the
    untruncated one for every source/target pair inside the window, and its
    transform is smooth, so a periodic box of size window + 2R reproduces the
    free-space convolution to spectral accuracy.
    """

    def __init__(self, shape, h):
        self.shape = tuple(shape)
        self.h = float(h)
        d = len(shape)
        L = max(shape) * h
        R = np.sqrt(d) * L * 1.0001
        self.size = tuple(fft.next_fast_len(int(np.ceil((n * h + 2 * R) / h)) + 2) for n in shape)
        self.k = np.meshgrid(
            *[2 * np.pi * fft.fftfreq(p, h) for p in self.size[:-1]],
            2 * np.pi * fft.rfftfreq(self.size[-1], h),
            indexing="ij",
        )
        kk = np.sqrt(sum(a * a for a in self.k))
        self.ghat = truncated_kernel_hat(kk, R, d)

    def _back(self, spec):
        d = len(self.shape)
        axes = tuple(range(-d, 0))
        out = fft.irfftn(self.ghat * spec, s=self.size, axes=axes)
        return out[(Ellipsis,) + tuple(slice(0, n) for n in self.shape)]

    def _fwd(self, a):
        d = len(self.shape)
        return fft.rfftn(a, s=self.size, axes=tuple(range(-d, 0)))

    def divdiv(self, g):
        """-Lap u = div div g for ``g`` of shape ``(..., d, d, *grid)``."""
        d = len(self.shape)
        spec = 0
        for i in range(d):
            for j in range(d):
                spec = spec - self.k[i] * self.k[j] * self._fwd(g[(Ellipsis, i, j) + (slice(None),) * d])
        return self._back(spec)

    def div(self, f):
        """-Lap u = div f for ``f`` of shape ``(..., d, *grid)``."""
        d = len(self.shape)
        spec = 0
        for i in range(d):
            spec = spec + 1j * self.k[i] * self._fwd(f[(Ellipsis, i) + (slice(None),) * d])
        return self._back(spec)


@lru_cache(maxsize=16)
def spectral_solver(shape, h):
    return SpectralSolver(shape, h)


# ------------------------------------------------------ direct far field


def kernel_gradient(x, d):
    """grad of the Newtonian potential at points ``x`` (shape ``(..., d)``)."""
    r2 = (x ** 2).sum(-1, keepdims=True)
    if d == 2:
        return -x / (2 * np.pi * r2)
    return -x / (4 * np.pi * r2 ** 1.5)


def kernel_hessian(x, d):
    """Second derivatives of the Newtonian potential -> ``(..., d, d)``."""
    r2 = (x ** 2).sum(-1)[..., None, None]
    eye = np.eye(d)
    outer = x[..., :, None] * x[..., None, :]
    if d == 2:
        return -(eye * r2 - 2 * outer) / (2 * np.pi * r2 ** 2)
    return (3 * outer - eye * r2) / (4 * np.pi * r2 ** 2.5)


def far_field_divdiv(g, points, centers, h):
    """Direct sum of Hess(Gamma)(x - y) : g(y) h^d; ``g`` is ``(n, d, d)`` at ``centers`` ``(n, d)``."""
    d = centers.shape[1]
    out = np.empty(len(points))
    for k, p in enumerate(points):
        out[k] = (kernel_hessian(p - centers, d) * g).sum() * h ** d
    return out


def far_field_div(f, points, centers, h):
    """Direct sum of grad(Gamma)(x - y) . f(y) h^d; ``f`` is ``(n, d)``."""
    d = centers.shape[1]
    out = np.empty(len(points))
    for k, p in enumerate(points):
        out[k] = (kernel_gradient(p - centers, d) * f).sum() * h ** d
    return out
