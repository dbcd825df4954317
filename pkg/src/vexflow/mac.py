"""Staggered (MAC) operators on a 2-D box with no-slip walls.

Velocity ``u`` lives on x-faces with shape ``(nx + 1, ny)`` and ``v`` on
y-faces with shape ``(nx, ny + 1)``; pressure-like quantities live at the
``(nx, ny)`` cell centers and the shear strain at the ``(nx + 1, ny + 1)``
nodes.  The unknowns are the interior ("free") faces, packed u first.
Tangential wall values use the mirrored ghost ``u_ghost = -u_inside``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


def _diff(n, h):
    """(n) x (n + 1) first difference over face values."""
    return sparse.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1)) / h


@dataclass(frozen=True, eq=False)
class MacGrid:
    nx: int
    ny: int
    h: float

    @property
    def n_u(self):
        return (self.nx - 1) * self.ny

    @property
    def n_v(self):
        return self.nx * (self.ny - 1)

    @property
    def n_free(self):
        return self.n_u + self.n_v

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    # -- packing -------------------------------------------------------

    def unpack(self, w):
        w = np.asarray(w, dtype=float)
        u = np.zeros((self.nx + 1, self.ny))
        v = np.zeros((self.nx, self.ny + 1))
        u[1:-1, :] = w[: self.n_u].reshape(self.nx - 1, self.ny)
        v[:, 1:-1] = w[self.n_u :].reshape(self.nx, self.ny - 1)
        return u, v

    def pack(self, u, v):
        return np.concatenate([np.asarray(u)[1:-1, :].ravel(), np.asarray(v)[:, 1:-1].ravel()])

    @cached_property
    def _embed(self):
        """Sparse maps from free faces to full face arrays (flattened)."""
        nx, ny = self.nx, self.ny
        Pu = sparse.kron(sparse.eye(nx + 1, nx - 1, k=-1), sparse.eye(ny))
        Pv = sparse.kron(sparse.eye(nx), sparse.eye(ny + 1, ny - 1, k=-1))
        Eu = sparse.hstack([Pu, sparse.csr_matrix((Pu.shape[0], self.n_v))])
        Ev = sparse.hstack([sparse.csr_matrix((Pv.shape[0], self.n_u)), Pv])
        return Eu.tocsr(), Ev.tocsr()

    # -- operators on free faces -----------------------------------------

    @cached_property
    def Bx(self):
        """Free faces -> d u / dx at cell centers."""
        Eu, _ = self._embed
        return (sparse.kron(_diff(self.nx, self.h), sparse.eye(self.ny)) @ Eu).tocsr()

    @cached_property
    def By(self):
        """Free faces -> d v / dy at cell centers."""
        _, Ev = self._embed
        return (sparse.kron(sparse.eye(self.nx), _diff(self.ny, self.h)) @ Ev).tocsr()

    @cached_property
    def D(self):
        """Discrete divergence, free faces -> cells."""
        return (self.Bx + self.By).tocsr()

    @cached_property
    def G(self):
        """Discrete gradient, cells -> free faces (the negative adjoint of D)."""
        return (-self.D.T).tocsr()

    @cached_property
    def Bxy(self):
        """Free faces -> half the shear rate (d u / dy + d v / dx) / 2 at nodes."""
        nx, ny, h = self.nx, self.ny, self.h
        Eu, Ev = self._embed
        # d/dy of u at nodes (i, j): (u[i, j] - u[i, j-1]) / h with mirrored ghosts
        dy = sparse.diags([-np.ones(ny), np.ones(ny)], [-1, 0], shape=(ny + 1, ny)).tolil()
        dy[0, 0] = 2.0
        dy[ny, ny - 1] = -2.0
        dyu = sparse.kron(sparse.eye(nx + 1), dy.tocsr() / h)
        dx = sparse.diags([-np.ones(nx), np.ones(nx)], [-1, 0], shape=(nx + 1, nx)).tolil()
        dx[0, 0] = 2.0
        dx[nx, nx - 1] = -2.0
        dxv = sparse.kron(dx.tocsr() / h, sparse.eye(ny + 1))
        return (0.5 * (dyu @ Eu + dxv @ Ev)).tocsr()

    @cached_property
    def Nc(self):
        """Nodes -> cells, the average of the four corners."""
        ax = sparse.diags([np.ones(self.nx), np.ones(self.nx)], [0, 1], shape=(self.nx, self.nx + 1))
        ay = sparse.diags([np.ones(self.ny), np.ones(self.ny)], [0, 1], shape=(self.ny, self.ny + 1))
        return (0.25 * sparse.kron(ax, ay)).tocsr()

    @cached_property
    def node_weight(self):
        """Fraction n_k / 4 of the four cells around node k that lie in the box."""
        return np.asarray(self.Nc.sum(axis=0)).ravel()

    @cached_property
    def neumann_laplacian(self):
        return (-self.D @ self.D.T).tocsc()

    @cached_property
    def _neumann_lu(self):
        L = self.neumann_laplacian[:-1, :-1]
        return splu(L.tocsc())

    def solve_neumann(self, rhs):
        """Zero-mean solution of L_N p = rhs (rhs projected onto zero sum first)."""
        rhs = np.asarray(rhs, dtype=float)
        rhs = rhs - rhs.mean()
        p = np.zeros(self.n_cells)
        p[:-1] = self._neumann_lu.solve(rhs[:-1])
        return p - p.mean()

    # -- geometry --------------------------------------------------------

    def face_coordinates(self, origin=(0.0, 0.0)):
        ox, oy = origin
        h = self.h
        xu = ox + h * np.arange(self.nx + 1)
        yu = oy + h * (np.arange(self.ny) + 0.5)
        xv = ox + h * (np.arange(self.nx) + 0.5)
        yv = oy + h * np.arange(self.ny + 1)
        return np.meshgrid(xu, yu, indexing="ij"), np.meshgrid(xv, yv, indexing="ij")

    def node_coordinates(self, origin=(0.0, 0.0)):
        ox, oy = origin
        return np.meshgrid(ox + self.h * np.arange(self.nx + 1), oy + self.h * np.arange(self.ny + 1), indexing="ij")

    def cell_coordinates(self, origin=(0.0, 0.0)):
        ox, oy = origin
        return np.meshgrid(
            ox + self.h * (np.arange(self.nx) + 0.5), oy + self.h * (np.arange(self.ny) + 0.5), indexing="ij"
        )

    # -- convection --------------------------------------------------------

    def convective_flux(self, w):
        """Momentum flux of u (x) u: (T11, T22) at centers and T12 at nodes."""
        u, v = self.unpack(w)
        uc = 0.5 * (u[1:] + u[:-1])
        vc = 0.5 * (v[:, 1:] + v[:, :-1])
        uy = np.zeros((self.nx + 1, self.ny + 1))
        uy[:, 1:-1] = 0.5 * (u[:, 1:] + u[:, :-1])
        vx = np.zeros((self.nx + 1, self.ny + 1))
        vx[1:-1, :] = 0.5 * (v[1:] + v[:-1])
        return uc * uc, vc * vc, uy * vx

    def tensor_divergence(self, t11, t22, t12):
        """Face vector div T for T11/T22 at centers and T12 at nodes, on free faces."""
        h = self.h
        cu = (t11[1:, :] - t11[:-1, :]) / h + (t12[1:-1, 1:] - t12[1:-1, :-1]) / h
        cv = (t12[1:, 1:-1] - t12[:-1, 1:-1]) / h + (t22[:, 1:] - t22[:, :-1]) / h
        return np.concatenate([cu.ravel(), cv.ravel()])

    def convection(self, w):
        return self.tensor_divergence(*self.convective_flux(w))

    def cell_velocity(self, w):
        """Face velocities averaged to cell centers -> ``(nx, ny, 2)``."""
        u, v = self.unpack(w)
        return np.stack([0.5 * (u[1:] + u[:-1]), 0.5 * (v[:, 1:] + v[:, :-1])], axis=-1)


@lru_cache(maxsize=16)
def mac_grid(nx, ny, h):
    return MacGrid(nx, ny, h)
