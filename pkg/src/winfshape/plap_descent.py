"""
p-Laplace relaxation of the W^{1,inf} descent problem.

For increasing ``p`` the deformation minimising

    t J'(u) + 1/p int (eps + |Du|^2)^{p/2} dx   s.t.  g(u) = 0

is computed by Newton's method, each solve starting from the previous one.
The direction returned is the solution for the last (largest) ``p``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .winf_descent import (DeformationSpace, DescentError, DescentResult, NewtonStats,
                           _dual, cell_norm, newton_saddle, write_diagnostics)

DEFAULT_SCHEDULE = (2.0, 2.5, 3.0, 3.5, 4.0, 4.4, 4.8)


@dataclass(frozen=True)
class PlapConfig:
    """Parameters of the p-continuation.

    ``scale`` multiplies the shape derivative; the solution grows like
    ``scale ** (1 / (p - 1))``.  When a gradient bound ``sigma`` is passed to
    :func:`plap_descent` and ``normalize`` is set, the derivative is scaled
    so that the final direction has largest cellwise gradient close to
    ``sigma`` (within ``budget_rtol``), which makes its size comparable to
    the W^{1,inf} direction.
    """

    schedule: tuple = DEFAULT_SCHEDULE
    eps_reg: float = 1e-10
    scale: float = 1.0
    normalize: bool = True
    budget_rtol: float = 0.05
    max_bisections: int = 6
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12
    newton_maxiter: int = 50
    max_halvings: int = 10

    def __post_init__(self):
        s = tuple(float(p) for p in self.schedule)
        object.__setattr__(self, "schedule", s)
        if not s or s[0] != 2.0 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("p schedule must start at 2 and increase strictly")
        if not self.eps_reg > 0:
            raise ValueError("eps_reg must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def p_max(self):
        return self.schedule[-1]


class PEnergy:
    """Gradient and exact second variation of ``1/p int (eps + |Du|^2)^{p/2}``."""

    def __init__(self, space, p, eps):
        self.space, self.p, self.eps = space, p, eps
        M = space.mesh.n_cells
        self._indptr = np.arange(M + 1)
        self._indices = np.arange(M)

    def _coeffs(self, Du):
        s = self.eps + np.einsum("mij,mij->m", Du, Du)
        a = s ** (0.5 * (self.p - 2))
        b = (self.p - 2) * s ** (0.5 * (self.p - 4))
        return a, b

    def value(self, u):
        Du = self.space.grad(u)
        s = self.eps + np.einsum("mij,mij->m", Du, Du)
        return float(self.space.mesh.areas @ s ** (0.5 * self.p)) / self.p

    def gradient(self, u):
        Du = self.space.grad(u)
        a, _ = self._coeffs(Du)
        return self.space.div_form(a[:, None, None] * Du)

    def hessian(self, u):
        sp_ = self.space
        Du = sp_.grad(u)
        a, b = self._coeffs(Du)
        g = Du.reshape(-1, 4)
        w = sp_.mesh.areas
        blocks = (w * a)[:, None, None] * np.eye(4) + (w * b)[:, None, None] * np.einsum("mi,mj->mij", g, g)
        C = sp.bsr_matrix((blocks, self._indices, self._indptr), shape=(4 * len(w), 4 * len(w)))
        D = sp_.D
        H = (D.T @ C.tocsr() @ D).tocsr()
        H.sort_indices()
        return H


def _solve(jt, p, u, mu, space, constraints, cfg, stats):
    energy = PEnergy(space, p, cfg.eps_reg)
    try:
        return newton_saddle(lambda v: jt + energy.gradient(v), energy.hessian, u, mu, space,
                             constraints, rtol=cfg.newton_rtol, atol=cfg.newton_atol,
                             maxiter=cfg.newton_maxiter, max_halvings=cfg.max_halvings, stats=stats)[:2]
    except DescentError as exc:
        raise DescentError(f"p-Laplace Newton failed at p = {p}: {exc}", exc.trace) from None


def plap_descent(jp, mesh, constraints, cfg=PlapConfig(), space=None, diagnostics=None, sigma=None):
    """Descent direction from the p-Laplace relaxation.

    Parameters
    ----------
    jp : ShapeGradient or array
    mesh : TriMesh
    constraints : GeometricConstraints or None
    cfg : PlapConfig
    sigma : float, optional
        Target for the largest cellwise gradient of the direction.

    Returns
    -------
    DescentResult
        ``iterations`` counts the Newton solves (one per ``p`` plus any
        rescaling solves at the largest ``p``); ``doublings`` is always 0.

    Raises
    ------
    DescentError
        Newton failure, with the failing ``p`` in the message.
    """
    space = space or DeformationSpace(mesh)
    j0 = _dual(jp).copy()
    j0[space.fixed] = 0.0
    jt = cfg.scale * j0
    budget = sigma is not None and cfg.normalize and np.any(j0)
    if budget:
        u0 = space.poisson_extension(j0)
        jt *= sigma / float(cell_norm(space.grad(u0), "spectral").max())
    u = np.zeros(2 * mesh.n_vertices)
    mu = np.zeros(3)
    stats = NewtonStats()
    trace = []

    def record(k, p, n_before):
        D = space.grad(u)
        trace.append(dict(iteration=k, p=p, residual=stats.trace[-1],
                          max_du=float(cell_norm(D, "spectral").max()),
                          mu0=mu[0] if len(mu) else 0.0, mu1=mu[1] if len(mu) else 0.0,
                          mu2=mu[2] if len(mu) else 0.0, doublings=0,
                          newton=stats.iterations - n_before, status="solved"))

    p_done = None
    for k, p in enumerate(cfg.schedule):
        n_before = stats.iterations
        # a failed increment is retried through intermediate values of p
        targets = [p]
        depth = 0
        while targets:
            q = targets[-1]
            try:
                u, mu = _solve(jt, q, u, mu, space, constraints, cfg, stats)
            except DescentError:
                if p_done is None or depth >= cfg.max_bisections:
                    raise
                targets.append(0.5 * (p_done + q))
                depth += 1
                continue
            p_done = targets.pop()
        record(k, p, n_before)
        if budget and p < cfg.p_max:
            # keep the continuation path near the target size
            f = sigma / trace[-1]["max_du"]
            jt, u, mu = jt * f ** (p - 1), f * u, mu * f ** (p - 1)
    p = cfg.p_max
    # the unconstrained problem is homogeneous: scaling J' by f**(p-1) scales u by f
    for k in range(len(cfg.schedule), len(cfg.schedule) + 5):
        if not budget:
            break
        f = sigma / trace[-1]["max_du"]
        if abs(f - 1) <= cfg.budget_rtol:
            break
        jt = jt * f ** (p - 1)
        n_before = stats.iterations
        u, mu = _solve(jt, p, f * u, mu * f ** (p - 1), space, constraints, cfg, stats)
        record(k, p, n_before)
    max_du = float(cell_norm(space.grad(u), "spectral").max())
    result = DescentResult(u, float(j0 @ u), len(trace), 0, True, max_du,
                           mu if len(mu) else np.zeros(3), stats.iterations, stats.solves, trace=trace)
    if diagnostics is not None:
        write_diagnostics(diagnostics, trace, method="plap")
    return result
