"""
Steepest descent directions in W^{1,inf} by ADMM.

The descent problem

    min J'(u)  s.t.  u = 0 on the tunnel,  |Du| <= sigma,  g(u) = 0

is split with a cellwise constant slack ``q ~ Du`` and multiplier ``lam``.
Each ADMM sweep projects ``Du + lam`` onto the sigma-ball, solves the
constrained Poisson-type problem for ``(u, mu)`` by Newton's method with a
Schur complement on the three geometric multipliers, and updates ``lam``.
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import Factorized

log = logging.getLogger(__name__)


class DescentError(RuntimeError):
    """Inner Newton failure inside a descent computation."""

    def __init__(self, message, trace=(), iteration=None):
        self.trace = list(trace)
        self.iteration = iteration
        super().__init__(message)


@dataclass(frozen=True)
class AdmmConfig:
    """ADMM parameters.

    ``eps2`` and ``eps3`` default to ``1e-6 * |Omega| * sigma**2`` and
    ``0.05 * sigma``.  With ``normalize`` the shape derivative is first
    rescaled so that the unconstrained minimiser of ``J'(u) + tau/2 |Du|^2``
    has largest cellwise gradient ``sigma``.  The descent direction does not
    depend on this positive factor, but early ADMM iterates stay moderate
    instead of growing with the mesh resolution.
    """

    sigma: float = 0.3
    tau: float = 1.0
    eps2: float | None = None
    eps3: float | None = None
    max_iter: int = 200
    norm: str = "spectral"
    projection: str = "radial"
    max_doublings: int = 20
    normalize: bool = True
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12
    newton_maxiter: int = 50
    max_halvings: int = 10

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.projection not in ("radial", "clip"):
            raise ValueError(f"unknown projection {self.projection!r}")
        for name in ("eps2", "eps3"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def tolerances(self, area):
        eps2 = self.eps2 if self.eps2 is not None else 1e-6 * area * self.sigma ** 2
        eps3 = self.eps3 if self.eps3 is not None else 0.05 * self.sigma
        return eps2, eps3


class Status(enum.Enum):
    CONTINUE = "continue"
    DOUBLE = "double"
    CONVERGED = "converged"
    BUDGET = "budget"


@dataclass
class DescentResult:
    u: np.ndarray
    directional: float
    iterations: int
    doublings: int
    converged: bool
    max_du: float
    mu: np.ndarray
    newton_iterations: int = 0
    linear_solves: int = 0
    q: np.ndarray | None = None
    lam: np.ndarray | None = None
    trace: list = field(default_factory=list)

    def field(self):
        """The deformation as an (N, 2) vertex array."""
        return self.u.reshape(2, -1).T


# -- cellwise tensor norms ---------------------------------------------------


def spectral_norm(A):
    """Largest singular value of each 2x2 block of an (M, 2, 2) array."""
    fro2 = np.einsum("mij,mij->m", A, A)
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    disc = np.sqrt(np.maximum(fro2 * fro2 - 4 * det * det, 0.0))
    return np.sqrt(0.5 * (fro2 + disc))


def cell_norm(A, kind="spectral"):
    if kind == "spectral":
        return spectral_norm(A)
    return np.sqrt(np.einsum("mij,mij->m", A, A))


def update_q(Du, lam, cfg):
    """Minimise the augmented Lagrangian over the slack ``q`` cellwise.

    The mass matrix of the cellwise constant space is diagonal, so the
    unconstrained minimiser is ``Du + lam``; it is then scaled back into the
    sigma-ball (or its singular values clipped with ``projection="clip"``).
    """
    qt = Du + lam
    if cfg.projection == "clip":
        U, s, Vt = np.linalg.svd(qt)
        s = np.minimum(s, cfg.sigma)
        q = np.einsum("mij,mj,mjk->mik", U, s, Vt)
        kind = "spectral"
    else:
        nrm = cell_norm(qt, cfg.norm)
        q = qt / np.maximum(1.0, nrm / cfg.sigma)[:, None, None]
        kind = cfg.norm
    # rounding may leave a projected cell a few ulps outside the ball
    for _ in range(8):
        over = cell_norm(q, kind) > cfg.sigma
        if not over.any():
            break
        q[over] *= 1.0 - 4 * np.finfo(float).eps
    return q


def check_convergence(d_lambda, d_u, d_sigma, doublings, cfg, eps2, eps3, iteration=None):
    """Stopping logic of the ADMM sweep.

    ``d_lambda`` and ``d_u`` are the squared L2 norms of the multiplier and
    deformation updates, ``d_sigma = sigma - max|Du|``.
    """
    if d_lambda + d_u < eps2 and d_sigma > -eps3:
        if d_sigma > eps3:
            if doublings < cfg.max_doublings:
                return Status.DOUBLE
        else:
            return Status.CONVERGED
    if iteration is not None and iteration + 1 >= cfg.max_iter:
        return Status.BUDGET
    return Status.CONTINUE


# -- operators on the deformation space ----------------------------------------


class DeformationSpace:
    """P1-vector deformations vanishing on the tunnel boundary."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.N = mesh.n_vertices
        self.space = fem.build_space(mesh, "P1-vector", ["inflow", "outflow", "wall"])
        self.free = self.space.free
        self.fixed = self.space.dirichlet

    @cached_property
    def D(self):
        return fem.gradient_operator(self.mesh)

    @cached_property
    def cell_weights(self):
        return np.repeat(self.mesh.areas, 4)

    @cached_property
    def laplacian(self):
        return fem.vector_laplacian(self.mesh)

    @cached_property
    def mass(self):
        M1 = fem.p1_mass(self.mesh)
        return sp.block_diag([M1, M1], format="csr")

    @cached_property
    def ordering(self):
        """Nested-dissection order of the free dofs, shared by every Newton matrix."""
        ones = np.ones((self.mesh.n_cells, 6, 6))
        dofs = np.hstack([self.mesh.cells, self.mesh.cells + self.N])
        P = fem.assemble_matrix(ones, dofs, shape=(2 * self.N, 2 * self.N))
        P = P[self.free][:, self.free]
        return fem.fill_reducing_ordering(P) if P.shape[0] > 2000 else None

    def grad(self, u):
        return (self.D @ u).reshape(-1, 2, 2)

    def div_form(self, Q):
        """Dual vector ``v -> int Q : Dv``."""
        return self.D.T @ (self.cell_weights * Q.reshape(-1))

    def l2sq_tensor(self, Q):
        return float(self.mesh.areas @ np.einsum("mij,mij->m", Q, Q))

    def l2sq(self, u):
        return float(u @ (self.mass @ u))

    def poisson_extension(self, f):
        """``u`` with ``int Du : Dv = f(v)`` for all admissible ``v``."""
        u = np.zeros(2 * self.N)
        K = self.laplacian[self.free][:, self.free]
        u[self.free] = Factorized(K, self.ordering).solve(f[self.free])
        return u

    def min_det(self, u):
        F = self.grad(u)
        det = (1 + F[:, 0, 0]) * (1 + F[:, 1, 1]) - F[:, 0, 1] * F[:, 1, 0]
        return float(det.min())


# -- Newton with Schur complement -------------------------------------------------


def schur_step(A, B, r_u, r_mu, perm=None):
    """Solve ``[[A, B], [B^T, 0]] (du, dmu) = (r_u, r_mu)``.

    Uses one factorisation of ``A``, ``m`` solves to form ``A^{-1} B`` and
    the dense ``m x m`` Schur complement ``S = -B^T A^{-1} B``, plus one
    solve for ``A^{-1} r_u``.

    Returns ``(du, dmu, n_solves)``.
    """
    fac = Factorized(A, perm)
    y = fac.solve(r_u)
    if B is None or B.shape[1] == 0:
        return y, np.zeros(0), fac.solves
    Z = np.column_stack([fac.solve(B[:, i]) for i in range(B.shape[1])])
    S = -B.T @ Z
    dmu = np.linalg.solve(S, r_mu - B.T @ y)
    du = y - Z @ dmu
    return du, dmu, fac.solves


@dataclass
class NewtonStats:
    iterations: int = 0
    solves: int = 0
    trace: list = field(default_factory=list)


def newton_saddle(gradient, hessian, u0, mu0, space, constraints, rtol=1e-10, atol=1e-12,
                  maxiter=50, max_halvings=10, stats=None):
    """Newton's method for ``grad f(u) + B(u) mu = 0, g(u) = 0``.

    ``gradient(u)`` and ``hessian(u)`` describe the unconstrained part ``f``
    as a dual vector and a sparse matrix on the full P1-vector space.  Only
    free dofs are updated.  Steps are halved while the residual grows or a
    cell would invert.
    """
    stats = stats or NewtonStats()
    free = space.free
    u = u0.copy()
    u[space.fixed] = 0.0
    use_g = constraints is not None
    mu = np.array(mu0, dtype=float) if use_g else np.zeros(0)

    def residual(u, mu):
        r_u = -gradient(u)
        if use_g:
            B = constraints.gradient(u)
            r_u -= B @ mu
            return r_u[free], -constraints.eval(u), B
        return r_u[free], np.zeros(0), None

    r_u, r_mu, B = residual(u, mu)
    rnorm = np.hypot(np.linalg.norm(r_u), np.linalg.norm(r_mu))
    tol = max(rtol * rnorm, atol)
    stats.trace.append(rnorm)
    it = 0
    while rnorm > tol:
        if it >= maxiter:
            raise DescentError(f"Newton did not converge in {maxiter} steps (residual {rnorm:.3e})", stats.trace)
        A = hessian(u)
        if use_g:
            A = A + constraints.hessian(u, mu)
        A = A[free][:, free]
        du, dmu, ns = schur_step(A, B[free] if use_g else None, r_u, r_mu, space.ordering)
        stats.solves += ns
        step = 1.0
        for _ in range(max_halvings + 1):
            ut = u.copy()
            ut[free] += step * du
            mut = mu + step * dmu
            if space.min_det(ut) > 0:
                rt_u, rt_mu, Bt = residual(ut, mut)
                rt = np.hypot(np.linalg.norm(rt_u), np.linalg.norm(rt_mu))
                if rt < rnorm:
                    break
            step *= 0.5
        else:
            # roundoff floor: the full step no longer reduces the residual
            if np.linalg.norm(du) <= 1e-12 * (1 + np.linalg.norm(u)):
                break
            raise DescentError(f"Newton step halving failed (residual {rnorm:.3e})", stats.trace)
        u, mu, r_u, r_mu, B, rnorm = ut, mut, rt_u, rt_mu, Bt, rt
        stats.trace.append(rnorm)
        it += 1
        stats.iterations += 1
    return u, mu, stats


def solve_u_subproblem(jp, q, lam, u0, mu0, space, constraints, cfg, stats=None):
    """Minimise the augmented Lagrangian over ``u`` subject to ``g(u) = 0``.

    Returns ``(u, mu, stats)``.
    """
    tau = cfg.tau
    K = space.laplacian
    rhs = jp - tau * space.div_form(q - lam)

    def gradient(u):
        return rhs + tau * (K @ u)

    def hessian(u):
        return tau * K

    return newton_saddle(gradient, hessian, u0, mu0, space, constraints,
                         rtol=cfg.newton_rtol, atol=cfg.newton_atol, maxiter=cfg.newton_maxiter,
                         max_halvings=cfg.max_halvings, stats=stats)


def _dual(jp):
    return np.asarray(getattr(jp, "dual", jp), dtype=float)


def admm_descent(jp, mesh, constraints, cfg=AdmmConfig(), space=None, diagnostics=None):
    """Approximate the constrained W^{1,inf} steepest descent direction.

    Parameters
    ----------
    jp : ShapeGradient or array
        Shape derivative with zero entries on the tunnel boundary.
    mesh : TriMesh
    constraints : GeometricConstraints or None
        ``None`` drops the geometric constraints.
    cfg : AdmmConfig
    diagnostics : path-like, optional
        Write one CSV row per ADMM iteration.

    Returns
    -------
    DescentResult
        Not converging within ``cfg.max_iter`` iterations is reported through
        ``converged=False`` rather than raised.
    """
    space = space or DeformationSpace(mesh)
    j0 = _dual(jp).copy()
    j0[space.fixed] = 0.0
    n = 2 * mesh.n_vertices
    M = mesh.n_cells
    eps2, eps3 = cfg.tolerances(float(mesh.areas.sum()))
    if not np.any(j0):
        z = np.zeros((M, 2, 2))
        return DescentResult(np.zeros(n), 0.0, 0, 0, True, 0.0, np.zeros(3), q=z, lam=z.copy())

    jcur = j0.copy()
    if cfg.normalize:
        u0 = space.poisson_extension(j0)
        jcur *= cfg.tau * cfg.sigma / float(cell_norm(space.grad(u0), cfg.norm).max())
    u = np.zeros(n)
    lam = np.zeros((M, 2, 2))
    mu = np.zeros(3)
    doublings = 0
    stats = NewtonStats()
    trace = []
    status = Status.CONTINUE
    it = -1
    for it in range(cfg.max_iter):
        q = update_q(space.grad(u), lam, cfg)
        try:
            u_new, mu, _ = solve_u_subproblem(jcur, q, lam, u, mu, space, constraints, cfg, stats)
        except DescentError as exc:
            raise DescentError(f"ADMM iteration {it}: {exc}", exc.trace, it) from None
        Du = space.grad(u_new)
        d_lam = cfg.tau * (Du - q)
        lam = lam + d_lam
        max_du = float(cell_norm(Du, cfg.norm).max())
        d_sigma = cfg.sigma - max_du
        res_lam = space.l2sq_tensor(d_lam)
        res_u = space.l2sq(u_new - u)
        u = u_new
        status = check_convergence(res_lam, res_u, d_sigma, doublings, cfg, eps2, eps3, it)
        trace.append(dict(iteration=it, residual=res_lam + res_u, max_du=max_du,
                          mu0=mu[0] if len(mu) else 0.0, mu1=mu[1] if len(mu) else 0.0,
                          mu2=mu[2] if len(mu) else 0.0, doublings=doublings, status=status.value))
        if status is Status.DOUBLE:
            jcur = 2.0 * jcur
            doublings += 1
        elif status in (Status.CONVERGED, Status.BUDGET):
            break

    max_du = float(cell_norm(space.grad(u), cfg.norm).max())
    result = DescentResult(u, float(j0 @ u), it + 1, doublings, status is Status.CONVERGED, max_du,
                           mu if len(mu) else np.zeros(3), stats.iterations, stats.solves, q, lam, trace)
    if diagnostics is not None:
        write_diagnostics(diagnostics, trace, method="winf")
    return result


def write_diagnostics(path, trace, method):
    cols = ["method", "iteration", "residual", "max_du", "mu0", "mu1", "mu2", "doublings", "status"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow(dict(row, method=method))
