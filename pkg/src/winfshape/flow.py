"""
Stationary incompressible Navier-Stokes flow past the obstacle.

Taylor-Hood P2/P1 discretisation of

    -nu Lap v + (v . grad) v + grad p = f,   div v = 0,

with prescribed velocity on inflow, wall and obstacle and the natural
do-nothing condition ``nu Dv n = p n`` on the outflow.  The module also
provides the energy dissipation functional, its adjoint equation and the
volumetric shape derivative of the discrete Lagrangian.

Unknown vectors are laid out as ``[v_x (P2), v_y (P2), p (P1)]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import Factorized
from .mesh import MARKERS, TriMesh

log = logging.getLogger(__name__)

# every integrand of the discrete Lagrangian is a polynomial of degree <= 5
QUAD_DEGREE = 5


def cosine_inflow(frequency=np.pi / 6):
    """Inflow ``e_1 cos(frequency * y)``."""
    def profile(x, y):
        return np.column_stack([np.cos(frequency * y), np.zeros_like(y)])
    return profile


@dataclass(frozen=True)
class FlowConfig:
    """Physical and solver parameters of the state equation.

    Attributes
    ----------
    nu : float
        Kinematic viscosity.
    inflow : callable, optional
        ``(x, y) -> (n, 2)`` velocity on the inflow boundary.  Defaults to
        ``cos(pi y / 6) e_1``, which lies in [0, 1] on the tunnel (-3, 3).
    dirichlet_values : callable, optional
        Velocity on *all* Dirichlet markers; overrides ``inflow`` and the
        no-slip data (used for manufactured solutions).
    forcing : callable, optional
        Body force ``(x, y) -> (n, 2)``.
    dirichlet_markers : tuple of str
    """

    nu: float = 0.02
    inflow: object = None
    dirichlet_values: object = None
    forcing: object = None
    dirichlet_markers: tuple = ("inflow", "wall", "obstacle")
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-13
    newton_maxiter: int = 25
    inflow_scale: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("viscosity must be positive")

    def inflow_profile(self):
        return self.inflow or cosine_inflow()


@dataclass
class FlowSolution:
    velocity: np.ndarray
    pressure: np.ndarray
    iterations: int = 0
    residuals: list = field(default_factory=list)

    def vertex_velocity(self):
        n = len(self.velocity) // 2
        return self.velocity.reshape(2, n).T


class FlowError(RuntimeError):
    pass


class NewtonError(FlowError):
    def __init__(self, message, history):
        self.history = list(history)
        super().__init__(message)


class NavierStokes:
    """Taylor-Hood discretisation on a fixed mesh.

    Field-independent matrices are assembled once; the convective part is
    reassembled for each linearisation.
    """

    def __init__(self, mesh: TriMesh, config: FlowConfig):
        self.mesh = mesh
        self.config = config
        self.V = fem.build_space(mesh, "P2-vector", config.dirichlet_markers)
        self.P = fem.build_space(mesh, "P1-scalar")
        self.n2 = self.V.n_scalar
        self.nv = self.V.n_dofs
        self.n = self.nv + self.P.n_dofs
        self.pts, self.wts = fem.quadrature(QUAD_DEGREE)
        self.phi = fem.p2_values(self.pts)                 # (Q, 6)
        self.psi = fem.p1_values(self.pts)                 # (Q, 3)
        self.dphi = fem.p2_gradients(mesh, self.pts)        # (M, Q, 6, 2)
        self.wq = self.wts[None, :] * mesh.areas[:, None]   # (M, Q)
        self.sdofs = self.V.dof_map[:, :6]
        natural = [c for name, c in MARKERS.items() if name not in config.dirichlet_markers]
        self.has_neumann = bool(np.isin(mesh.markers, natural).any())

    # -- static pieces ----------------------------------------------------

    @cached_property
    def stiffness(self):
        return fem.p2_stiffness(self.mesh)

    @cached_property
    def pressure_coupling(self):
        """``G[(a,k), c] = -int psi_c d_k phi_a`` of shape (nv, np)."""
        ploc = np.einsum("mq,qc,mqak->mkac", self.wq, self.psi, self.dphi)
        M = self.mesh.n_cells
        rows = np.stack([self.sdofs, self.sdofs + self.n2], axis=1)  # (M, 2, 6)
        rows = np.broadcast_to(rows[:, :, :, None], (M, 2, 6, 3))
        cols = np.broadcast_to(self.mesh.cells[:, None, None, :], (M, 2, 6, 3))
        G = sp.coo_matrix((-ploc.ravel(), (rows.ravel(), cols.ravel())), shape=(self.nv, self.P.n_dofs))
        return G.tocsr()

    @cached_property
    def stokes_matrix(self):
        nu = self.config.nu
        K = self.stiffness
        G = self.pressure_coupling
        A = sp.bmat([[sp.block_diag([nu * K, nu * K]), G], [G.T, None]], format="csr")
        return A

    @cached_property
    def dirichlet(self):
        """Fixed dofs and their values (including a pressure pin if needed)."""
        cfg = self.config
        nodes = fem.p2_nodes(self.mesh)
        values = np.zeros((self.n2, 2))
        if cfg.dirichlet_values is not None:
            bd = fem.boundary_dofs(self.mesh, 2, list(cfg.dirichlet_markers))
            values[bd] = cfg.dirichlet_values(nodes[bd, 0], nodes[bd, 1])
        elif "inflow" in cfg.dirichlet_markers:
            inflow = fem.boundary_dofs(self.mesh, 2, ["inflow"])
            values[inflow] = cfg.inflow_scale * cfg.inflow_profile()(nodes[inflow, 0], nodes[inflow, 1])
            noslip = [m for m in cfg.dirichlet_markers if m != "inflow"]
            values[fem.boundary_dofs(self.mesh, 2, noslip)] = 0.0
        fixed = self.V.dirichlet
        vals = values.T.ravel()[fixed]
        if not self.has_neumann:
            fixed = np.append(fixed, self.nv)
            vals = np.append(vals, 0.0)
        return fixed, vals

    @cached_property
    def free(self):
        mask = np.ones(self.n, dtype=bool)
        mask[self.dirichlet[0]] = False
        return np.flatnonzero(mask)

    @cached_property
    def forcing_vector(self):
        f = np.zeros(self.n)
        if self.config.forcing is None:
            return f
        pts, wts = fem.quadrature(6)
        phi = fem.p2_values(pts)
        xq = np.einsum("qa,mai->mqi", pts, self.mesh.vertices[self.mesh.cells])
        fq = self.config.forcing(xq[..., 0].ravel(), xq[..., 1].ravel()).reshape(self.mesh.n_cells, len(wts), 2)
        w = wts[None, :] * self.mesh.areas[:, None]
        loc = np.einsum("mq,qa,mqk->mka", w, phi, fq)
        for k in range(2):
            f[:self.nv] += fem.assemble_vector(loc[:, k], self.sdofs + k * self.n2, self.nv)
        return f

    # -- fields at quadrature points ------------------------------------

    def _local(self, vel):
        """(M, 6, 2) cell coefficients of a velocity vector."""
        return np.stack([vel[self.sdofs], vel[self.sdofs + self.n2]], axis=-1)

    def velocity_at_quad(self, vel):
        loc = self._local(vel)
        val = np.einsum("qa,mak->mqk", self.phi, loc)
        grad = np.einsum("mqaj,mak->mqkj", self.dphi, loc)
        return val, grad

    def pressure_at_quad(self, pres):
        return np.einsum("qc,mc->mq", self.psi, pres[self.mesh.cells])

    # -- nonlinear operators -----------------------------------------------

    def convection_matrix(self, vel, newton=True):
        """Linearised convection ``((v.grad) dv + (dv.grad) v) . phi`` (Picard part only if not newton)."""
        val, grad = self.velocity_at_quad(vel)
        M = self.mesh.n_cells
        adv = np.einsum("mqj,mqbj->mqb", val, self.dphi)
        n1 = np.einsum("mq,qa,mqb->mab", self.wq, self.phi, adv)
        r0 = self.sdofs
        blocks = []
        for k in range(2):
            for l in range(2):
                loc = np.zeros((M, 6, 6))
                if k == l:
                    loc += n1
                if newton:
                    loc += np.einsum("mq,qa,qb,mq->mab", self.wq, self.phi, self.phi, grad[:, :, k, l])
                blocks.append((loc, r0 + k * self.n2, r0 + l * self.n2))
        loc = np.concatenate([b[0] for b in blocks])
        rows = np.concatenate([b[1] for b in blocks])
        cols = np.concatenate([b[2] for b in blocks])
        return fem.assemble_matrix(loc, rows, cols, shape=(self.n, self.n))

    def residual(self, U):
        vel = U[:self.nv]
        C = self.convection_matrix(vel, newton=False)
        return self.stokes_matrix @ U + C @ U - self.forcing_vector

    def jacobian(self, U):
        return self.stokes_matrix + self.convection_matrix(U[:self.nv], newton=True)

    # -- solves -------------------------------------------------------------

    def _lift(self, U=None):
        U = np.zeros(self.n) if U is None else U.copy()
        fixed, vals = self.dirichlet
        U[fixed] = vals
        return U

    def stokes(self):
        fixed, vals = self.dirichlet
        A_ff, b_f, free = fem.reduce_dirichlet(self.stokes_matrix, self.forcing_vector, fixed, vals)
        U = self._lift()
        U[free] = Factorized(A_ff).solve(b_f)
        return U

    def newton(self, U0=None):
        cfg = self.config
        U = self.stokes() if U0 is None else self._lift(U0)
        free = self.free
        R = self.residual(U)
        rnorm = np.linalg.norm(R[free])
        history = [rnorm]
        scale = np.linalg.norm((self.stokes_matrix @ U)[free]) + np.linalg.norm(self.forcing_vector[free])
        tol = max(cfg.newton_rtol * scale, cfg.newton_atol)
        it = 0
        while rnorm > tol:
            if it >= cfg.newton_maxiter:
                raise NewtonError(f"Newton did not converge in {it} iterations (residual {rnorm:.3e})", history)
            J = self.jacobian(U)[free][:, free]
            dU = Factorized(J).solve(-R[free])
            step = 1.0
            for _ in range(11):
                trial = U.copy()
                trial[free] += step * dU
                Rt = self.residual(trial)
                rt = np.linalg.norm(Rt[free])
                if np.isfinite(rt) and rt < rnorm:
                    break
                step *= 0.5
            else:
                raise NewtonError(f"Newton line search failed at iteration {it} (residual {rnorm:.3e})", history)
            U, R, rnorm = trial, Rt, rt
            history.append(rnorm)
            it += 1
            scale = np.linalg.norm((self.stokes_matrix @ U)[free]) + np.linalg.norm(self.forcing_vector[free])
            tol = max(cfg.newton_rtol * scale, cfg.newton_atol)
        return U, it, history

    def split(self, U, gauge=True):
        vel, pres = U[:self.nv].copy(), U[self.nv:].copy()
        if gauge and not self.has_neumann:
            pres -= self.pressure_mean(pres)
        return vel, pres

    def pressure_mean(self, pres):
        a = self.mesh.areas
        return float((a * pres[self.mesh.cells].mean(axis=1)).sum() / a.sum())


def _model(mesh, config, model):
    if model is not None:
        return model
    return NavierStokes(mesh, config)


def solve_state(mesh, config=FlowConfig(), initial=None, model=None):
    """Solve the stationary Navier-Stokes equations.

    Newton's method starts from the Stokes solution, or from ``initial``
    (a :class:`FlowSolution` on a mesh with the same connectivity).

    Raises
    ------
    NewtonError
        With the residual history when Newton does not converge.
    """
    ns = _model(mesh, config, model)
    U0 = None
    if initial is not None:
        U0 = np.concatenate([initial.velocity, initial.pressure])
    U, it, hist = ns.newton(U0)
    vel, pres = ns.split(U)
    return FlowSolution(vel, pres, it, hist)


def energy(mesh, state, config=FlowConfig(), model=None):
    """Energy dissipation ``nu/2 int Dv : Dv``."""
    ns = _model(mesh, config, model)
    K = ns.stiffness
    v = state.velocity
    n = ns.n2
    return 0.5 * config.nu * float(v[:n] @ (K @ v[:n]) + v[n:] @ (K @ v[n:]))


def adjoint_matrix(ns, state):
    """Transposed Newton linearisation of the state equation at ``state``."""
    U = np.concatenate([state.velocity, state.pressure])
    return ns.jacobian(U).T.tocsr()


def solve_adjoint(mesh, config, state, model=None):
    """Solve the adjoint equation for ``(w, r)``.

    ``w`` vanishes on all Dirichlet boundaries of the state, so the adjoint
    inherits the natural outflow condition.
    """
    ns = _model(mesh, config, model)
    A = adjoint_matrix(ns, state)
    n = ns.n2
    rhs = np.zeros(ns.n)
    K = ns.stiffness
    v = state.velocity
    rhs[:n] = -config.nu * (K @ v[:n])
    rhs[n:ns.nv] = -config.nu * (K @ v[n:])
    fixed, _ = ns.dirichlet
    A_ff, b_f, free = fem.reduce_dirichlet(A, rhs, fixed, np.zeros(len(fixed)))
    W = np.zeros(ns.n)
    W[free] = Factorized(A_ff).solve(b_f)
    w, r = ns.split(W)
    return FlowSolution(w, r)


@dataclass
class ShapeGradient:
    """Shape derivative as a dual vector on the blocked P1-vector space."""

    dual: np.ndarray
    support: np.ndarray

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return float(self.dual @ (u if u.ndim == 1 else u.T.ravel()))

    def scaled(self, factor):
        return ShapeGradient(factor * self.dual, self.support)


def derivative_density(ns, state, adjoint):
    """Cellwise integrated matrix ``Mbar`` with ``J'[u] = sum_T Mbar_T : Du_T``."""
    nu = ns.config.nu
    v, Dv = ns.velocity_at_quad(state.velocity)
    w, Dw = ns.velocity_at_quad(adjoint.velocity)
    p = ns.pressure_at_quad(state.pressure)
    r = ns.pressure_at_quad(adjoint.pressure)
    divv = Dv[..., 0, 0] + Dv[..., 1, 1]
    divw = Dw[..., 0, 0] + Dw[..., 1, 1]
    conv_w = np.einsum("mqij,mqj,mqi->mq", Dv, v, w)
    scalar = (0.5 * nu * np.einsum("mqij,mqij->mq", Dv, Dv)
              + nu * np.einsum("mqij,mqij->mq", Dv, Dw)
              + conv_w - p * divw - r * divv)
    DvT = np.swapaxes(Dv, -1, -2)
    DwT = np.swapaxes(Dw, -1, -2)
    M = scalar[..., None, None] * np.eye(2)
    M -= nu * DvT @ Dv
    M -= nu * DvT @ Dw
    M -= nu * DwT @ Dv
    M -= np.einsum("mqj,mqk->mqjk", np.einsum("mqij,mqi->mqj", Dv, w), v)
    M += p[..., None, None] * DwT
    M += r[..., None, None] * DvT
    return np.einsum("mq,mqjk->mjk", ns.wq, M)


def shape_derivative(mesh, config, state, adjoint, restrict="vertices", model=None):
    """Volumetric shape derivative of the energy as a P1-vector dual vector.

    Parameters
    ----------
    restrict : {"vertices", "cells", False}
        ``"cells"`` integrates only over cells having a vertex on the
        obstacle.  ``"vertices"`` (the default, also selected by ``True``)
        additionally keeps only the entries of obstacle vertices, so the
        derivative acts as point loads on the obstacle boundary; these
        entries equal those of the full assembly.  ``False`` returns the
        exact derivative of the discrete energy.

    Entries belonging to tunnel-boundary vertices are always zeroed.
    """
    if restrict is True:
        restrict = "vertices"
    if restrict not in ("vertices", "cells", False, None):
        raise ValueError(f"unknown restriction {restrict!r}")
    ns = _model(mesh, config, model)
    Mbar = derivative_density(ns, state, adjoint)
    support = mesh.obstacle_cells if restrict else np.ones(mesh.n_cells, dtype=bool)
    Mbar = Mbar * support[:, None, None]
    g = mesh.barycentric_gradients
    loc = np.einsum("mkj,maj->mka", Mbar, g)
    N = mesh.n_vertices
    dual = np.concatenate([
        fem.assemble_vector(loc[:, 0], mesh.cells, N),
        fem.assemble_vector(loc[:, 1], mesh.cells, N),
    ])
    if restrict == "vertices":
        keep = np.zeros(N, dtype=bool)
        keep[mesh.obstacle_vertices] = True
        dual *= np.concatenate([keep, keep])
    outer = mesh.outer_vertices
    dual[outer] = 0.0
    dual[outer + N] = 0.0
    return ShapeGradient(dual, support)
