"""
Volume and barycenter constraints of a deformed fluid domain.

For a P1 deformation ``u`` with ``F = id + u`` the constraints are

    g_i(u) = int_Omega (F_i det DF - x_i) dx,   i = 1, 2
    g_3(u) = int_Omega (det DF - 1) dx

measured against the undeformed mesh.  ``Du`` is constant on each cell, so
every integral is evaluated in closed form per cell.  Derivatives use the
cofactor matrix, ``d det(A)[H] = cof(A) : H``.
"""
from __future__ import annotations

import numpy as np

from . import fem
from .mesh import as_vertex_field, deformation_gradient


def _cofactor(A):
    cof = np.empty_like(A)
    cof[:, 0, 0] = A[:, 1, 1]
    cof[:, 0, 1] = -A[:, 1, 0]
    cof[:, 1, 0] = -A[:, 0, 1]
    cof[:, 1, 1] = A[:, 0, 0]
    return cof


class GeometricConstraints:
    """Barycenter (x, y) and volume constraints on a reference mesh.

    Parameters
    ----------
    mesh : TriMesh
        Reference configuration; ``g(0) = 0``.
    """

    count = 3

    def __init__(self, mesh):
        self.mesh = mesh
        N = mesh.n_vertices
        self.dofs = np.hstack([mesh.cells, mesh.cells + N])
        self.fixed = np.concatenate([mesh.outer_vertices, mesh.outer_vertices + N])
        g = mesh.barycentric_gradients
        # d2 det [e_k grad l_a, e_l grad l_b] = g_a[k] g_b[l] - g_a[l] g_b[k]
        self._d2 = np.einsum("mak,mbl->mkalb", g, g) - np.einsum("mal,mbk->mkalb", g, g)
        self._gT = g.transpose(0, 2, 1)

    def _kinematics(self, u):
        m = self.mesh
        u = as_vertex_field(m, u)
        F = np.eye(2) + deformation_gradient(m, u)
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        Fmean = m.centroids + u[m.cells].mean(axis=1)  # cell average of F_i
        return F, det, Fmean

    def eval(self, u):
        a = self.mesh.areas
        _, det, Fmean = self._kinematics(u)
        c = self.mesh.centroids
        g = np.empty(3)
        g[0] = np.sum(a * (det * Fmean[:, 0] - c[:, 0]))
        g[1] = np.sum(a * (det * Fmean[:, 1] - c[:, 1]))
        g[2] = np.sum(a * (det - 1.0))
        return g

    def gradient(self, u):
        """(2N, 3) matrix whose columns are the constraint gradients."""
        m = self.mesh
        a = m.areas
        F, det, Fmean = self._kinematics(u)
        cof = _cofactor(F)
        cg = np.matmul(cof, self._gT)  # (M, 2, 3)
        N = m.n_vertices
        B = np.zeros((2 * N, 3))
        for i in range(2):
            loc = a[:, None, None] * Fmean[:, i, None, None] * cg
            loc[:, i, :] += (a * det / 3.0)[:, None]
            B[:, i] = fem.assemble_vector(loc.reshape(-1, 6), self.dofs, 2 * N)
        B[:, 2] = fem.assemble_vector((a[:, None, None] * cg).reshape(-1, 6), self.dofs, 2 * N)
        B[self.fixed] = 0.0
        return B

    def hessian(self, u, mu):
        """Sparse ``sum_i mu_i g_i''(u)`` on the blocked P1-vector space."""
        m = self.mesh
        mu = np.asarray(mu, dtype=float)
        N = m.n_vertices
        if not np.any(mu):
            return fem.assemble_matrix(np.zeros((m.n_cells, 6, 6)), self.dofs, shape=(2 * N, 2 * N))
        a = m.areas
        F, det, Fmean = self._kinematics(u)
        cg = np.matmul(_cofactor(F), self._gT)
        weight = mu[2] + mu[0] * Fmean[:, 0] + mu[1] * Fmean[:, 1]
        loc = (a * weight)[:, None, None, None, None] * self._d2
        for i in range(2):
            if mu[i] == 0.0:
                continue
            s = mu[i] * a / 3.0
            # u~_i cof : Du-bar  and  u-bar_i cof : Du~
            loc[:, i, :, :, :] += s[:, None, None, None] * cg[:, None, :, :]
            loc[:, :, :, i, :] += s[:, None, None, None] * cg[:, :, :, None]
        H = fem.assemble_matrix(loc.reshape(-1, 6, 6), self.dofs, shape=(2 * N, 2 * N))
        return H


def evaluate(mesh, u):
    return GeometricConstraints(mesh).eval(u)


def gradient(mesh, u):
    return GeometricConstraints(mesh).gradient(u)


def hessian_contribution(mesh, u, mu):
    return GeometricConstraints(mesh).hessian(u, mu)
