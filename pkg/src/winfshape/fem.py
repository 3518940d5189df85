"""
Finite element spaces, quadrature, sparse assembly and linear solvers.

Degrees of freedom of vector-valued spaces are stored component-blocked:
``[x-component dofs, y-component dofs]``.  P2 scalar dofs are numbered
vertices first, then edges in the order of :attr:`TriMesh.edges`.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh, marker_code

log = logging.getLogger(__name__)

RTOL, ATOL = 1e-10, 1e-12


class SolverError(RuntimeError):
    """Factorization failure or an unmet residual bound."""


class NonConvergenceError(SolverError):
    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(message)


# -- quadrature ---------------------------------------------------------------


def _orbit(a, b, c):
    pts = {(a, b, c), (b, c, a), (c, a, b), (a, c, b), (c, b, a), (b, a, c)}
    return sorted(pts)


def _rule(*groups):
    pts, wts = [], []
    for w, bary in groups:
        orbit = _orbit(*bary)
        pts += orbit
        wts += [w] * len(orbit)
    return np.array(pts, dtype=float), np.array(wts, dtype=float)


# Dunavant rules; weights normalised to sum to one (multiply by cell area).
QUADRATURE = {
    1: _rule((1.0, (1 / 3, 1 / 3, 1 / 3))),
    2: _rule((1 / 3, (2 / 3, 1 / 6, 1 / 6))),
    4: _rule(
        (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
        (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
    ),
    5: _rule(
        (0.225, (1 / 3, 1 / 3, 1 / 3)),
        (0.132394152788506, (0.059715871789770, 0.470142064105115, 0.470142064105115)),
        (0.125939180544827, (0.797426985353087, 0.101286507323456, 0.101286507323456)),
    ),
    6: _rule(
        (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
        (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
        (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
    ),
}
QUADRATURE[3] = QUADRATURE[4]


def quadrature(degree):
    """Barycentric points (Q, 3) and weights (Q,) exact to ``degree``."""
    for d in sorted(QUADRATURE):
        if d >= degree:
            pts, wts = QUADRATURE[d]
            return pts, wts / wts.sum()
    raise ValueError(f"no quadrature rule of degree {degree}")


# -- basis functions ---------------------------------------------------------

# local P2 dofs: 3 vertices, then edges opposite vertex 0, 1, 2
_EDGE_VERTS = ((1, 2), (2, 0), (0, 1))


def p1_values(bary):
    return np.asarray(bary, dtype=float)


def p2_values(bary):
    """(Q, 6) P2 shape function values at barycentric points."""
    lam = np.asarray(bary, dtype=float)
    out = np.empty((len(lam), 6))
    out[:, :3] = lam * (2 * lam - 1)
    for e, (i, j) in enumerate(_EDGE_VERTS):
        out[:, 3 + e] = 4 * lam[:, i] * lam[:, j]
    return out


def p2_gradients(mesh, bary):
    """(M, Q, 6, 2) physical gradients of the P2 shape functions."""
    lam = np.asarray(bary, dtype=float)
    g = mesh.barycentric_gradients
    out = np.empty((mesh.n_cells, len(lam), 6, 2))
    for a in range(3):
        out[:, :, a, :] = (4 * lam[None, :, a, None] - 1) * g[:, None, a, :]
    for e, (i, j) in enumerate(_EDGE_VERTS):
        out[:, :, 3 + e, :] = 4 * (lam[None, :, i, None] * g[:, None, j, :]
                                   + lam[None, :, j, None] * g[:, None, i, :])
    return out


# -- spaces -------------------------------------------------------------------

KINDS = ("P0-tensor", "P1-scalar", "P1-vector", "P2-scalar", "P2-vector")


@dataclass(frozen=True, eq=False)
class Space:
    """A finite element space on a mesh.

    ``dof_map[m]`` lists the global dofs of cell ``m``; for vector spaces the
    local order is all x-dofs, then all y-dofs.
    """

    mesh: TriMesh
    kind: str
    dof_map: np.ndarray
    n_dofs: int
    dirichlet: np.ndarray

    @property
    def free(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet] = False
        return np.flatnonzero(mask)

    @property
    def n_scalar(self):
        return self.n_dofs // 2 if self.kind.endswith("vector") else self.n_dofs


def _scalar_dofs(mesh, degree):
    if degree == 1:
        return mesh.cells, mesh.n_vertices
    return np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges]), mesh.n_vertices + mesh.n_edges


def boundary_dofs(mesh, degree, markers):
    """Scalar dofs (vertices and, for P2, edge midpoints) on the listed markers."""
    if not markers:
        return np.zeros(0, dtype=np.int64)
    verts = mesh.marked_vertices(markers)
    if degree == 1:
        return verts
    edges = mesh.boundary_edge_ids(markers)
    return np.unique(np.concatenate([verts, mesh.n_vertices + edges]))


def build_space(mesh, kind, dirichlet=()):
    """Build a space of the given kind with Dirichlet dofs on ``dirichlet`` markers."""
    if kind not in KINDS:
        raise ValueError(f"unknown space kind {kind!r}")
    for m in dirichlet:
        marker_code(m)
    if kind == "P0-tensor":
        dof_map = np.arange(4 * mesh.n_cells).reshape(-1, 4)
        return Space(mesh, kind, dof_map, 4 * mesh.n_cells, np.zeros(0, dtype=np.int64))
    degree = 1 if kind.startswith("P1") else 2
    dofs, n = _scalar_dofs(mesh, degree)
    bd = boundary_dofs(mesh, degree, list(dirichlet))
    if kind.endswith("vector"):
        return Space(mesh, kind, np.hstack([dofs, dofs + n]), 2 * n, np.concatenate([bd, bd + n]))
    return Space(mesh, kind, dofs, n, bd)


# -- assembly -----------------------------------------------------------------


def assemble_matrix(local, row_dofs, col_dofs=None, shape=None):
    """Sum local (M, r, c) blocks into a CSR matrix."""
    col_dofs = row_dofs if col_dofs is None else col_dofs
    M, r = row_dofs.shape
    c = col_dofs.shape[1]
    rows = np.broadcast_to(row_dofs[:, :, None], (M, r, c)).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], (M, r, c)).ravel()
    if shape is None:
        shape = (int(row_dofs.max()) + 1, int(col_dofs.max()) + 1)
    A = sp.coo_matrix((np.asarray(local).ravel(), (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def assemble_vector(local, dofs, n):
    return np.bincount(dofs.ravel(), weights=np.asarray(local).ravel(), minlength=n)


def p1_mass(mesh):
    local = np.full((3, 3), 1 / 12) + np.eye(3) / 12
    return assemble_matrix(mesh.areas[:, None, None] * local, mesh.cells,
                           shape=(mesh.n_vertices, mesh.n_vertices))


def p1_stiffness(mesh):
    g = mesh.barycentric_gradients
    local = mesh.areas[:, None, None] * np.einsum("mai,mbi->mab", g, g)
    return assemble_matrix(local, mesh.cells, shape=(mesh.n_vertices, mesh.n_vertices))


def gradient_operator(mesh):
    """Sparse map from blocked P1-vector coefficients to cellwise ``Du``.

    Row ``4*m + 2*i + j`` holds ``(Du)_ij`` on cell ``m``.
    """
    N, M = mesh.n_vertices, mesh.n_cells
    g = mesh.barycentric_gradients
    rows, cols, vals = [], [], []
    cell_ids = np.arange(M)
    for i in range(2):
        for j in range(2):
            for a in range(3):
                rows.append(4 * cell_ids + 2 * i + j)
                cols.append(mesh.cells[:, a] + i * N)
                vals.append(g[:, a, j])
    D = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(4 * M, 2 * N)).tocsr()
    D.sum_duplicates()
    return D


def vector_laplacian(mesh):
    """``int Du : Dv`` on the blocked P1-vector space."""
    K = p1_stiffness(mesh)
    return sp.block_diag([K, K], format="csr")


def p2_stiffness(mesh):
    pts, wts = quadrature(2)
    G = p2_gradients(mesh, pts)
    local = np.einsum("q,m,mqai,mqbi->mab", wts, mesh.areas, G, G)
    dofs, n = _scalar_dofs(mesh, 2)
    return assemble_matrix(local, dofs, shape=(n, n))


def p2_mass(mesh):
    pts, wts = quadrature(4)
    phi = p2_values(pts)
    local = mesh.areas[:, None, None] * np.einsum("q,qa,qb->ab", wts, phi, phi)[None]
    dofs, n = _scalar_dofs(mesh, 2)
    return assemble_matrix(local, dofs, shape=(n, n))


KERNELS = {
    "p1_mass": p1_mass,
    "p1_stiffness": p1_stiffness,
    "vector_laplacian": vector_laplacian,
    "p2_stiffness": p2_stiffness,
    "p2_mass": p2_mass,
    "gradient": gradient_operator,
}


def assemble(kernel, mesh):
    """Assemble a named field-independent kernel (see :data:`KERNELS`)."""
    try:
        return KERNELS[kernel](mesh)
    except KeyError:
        raise ValueError(f"unknown kernel {kernel!r}") from None


def interpolate_p2(mesh, func):
    """Nodal P2 interpolant of ``func(x, y) -> (..., k)`` at vertices and edge midpoints."""
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    pts = np.vstack([mesh.vertices, mids])
    return np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float)


def p2_nodes(mesh):
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    return np.vstack([mesh.vertices, mids])


# -- linear solvers -----------------------------------------------------------


def _tolerance(b):
    return max(RTOL * np.linalg.norm(b), ATOL)


_ORDERINGS = {}


def fill_reducing_ordering(A):
    """Nested-dissection permutation of the symmetrised pattern of ``A``.

    Orderings are cached by sparsity pattern, which stays fixed while a mesh
    is deformed.  Returns ``None`` when METIS is unavailable.
    """
    try:
        import pymetis
    except ImportError:  # pragma: no cover
        return None
    A = sp.csr_matrix(A)
    key = (A.shape, A.nnz, hashlib.sha1(A.indptr.tobytes() + A.indices.tobytes()).hexdigest())
    perm = _ORDERINGS.get(key)
    if perm is None:
        S = (abs(A) + abs(A.T)).tocsr()
        S.setdiag(0)
        S.eliminate_zeros()
        perm, _ = pymetis.nested_dissection(adjacency=pymetis.CSRAdjacency(S.indptr, S.indices))
        perm = np.asarray(perm, dtype=np.int64)
        if len(_ORDERINGS) > 16:
            _ORDERINGS.clear()
        _ORDERINGS[key] = perm
    return perm


class Factorized:
    """Sparse LU factorisation reusable for several right-hand sides.

    Large systems are symmetrically permuted by nested dissection and
    factored with threshold pivoting, which also handles the zero pressure
    block of saddle point matrices.  A precomputed symmetric permutation
    may be passed as ``perm``.
    """

    def __init__(self, A, perm=None):
        A = sp.csr_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise SolverError("matrix is not square")
        self.A = A
        self.solves = 0
        if perm is None and A.shape[0] > 2000:
            perm = fill_reducing_ordering(A)
        self.perm = perm
        try:
            if self.perm is None:
                self._lu = spla.splu(A.tocsc())
            else:
                P = A[self.perm][:, self.perm].tocsc()
                self._lu = spla.splu(P, permc_spec="NATURAL", diag_pivot_thresh=0.01,
                                     options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from None
        d = np.abs(self._lu.U.diagonal())
        if not np.all(np.isfinite(d)) or d.min() <= 1e-14 * max(d.max(), 1e-300):
            k = int(np.argmin(d))
            raise SolverError(f"singular factorization: pivot {k} = {d[k]:.3e} (max {d.max():.3e})")

    def _raw_solve(self, b):
        if self.perm is None:
            return self._lu.solve(b)
        x = np.empty_like(b)
        x[self.perm] = self._lu.solve(b[self.perm])
        return x

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = self._raw_solve(b)
        self.solves += 1
        tol = _tolerance(b) if b.ndim == 1 else None
        if tol is not None:
            for _ in range(2):
                r = b - self.A @ x
                if np.linalg.norm(r) <= tol:
                    break
                x = x + self._raw_solve(r)
            else:
                r = np.linalg.norm(b - self.A @ x)
                if r > tol:
                    log.warning("direct solve residual %.3e above %.3e", r, tol)
        return x


def linear_solve(A, b, method="direct", maxiter=10000):
    """Solve ``A x = b`` to ``max(1e-10 |b|, 1e-12)``.

    ``method`` is ``"direct"`` (sparse LU, handles indefinite systems) or
    ``"krylov"`` (BiCGStab with Jacobi preconditioning).
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise SolverError("nonconforming system")
    if method == "direct":
        return Factorized(A).solve(b)
    if method != "krylov":
        raise ValueError(f"unknown solver method {method!r}")
    diag = A.diagonal()
    if np.any(diag == 0):
        raise SolverError("zero diagonal entry; Jacobi preconditioner undefined")
    P = spla.LinearOperator(A.shape, matvec=lambda x: x / diag)
    history = []
    bnorm = np.linalg.norm(b)
    tol = _tolerance(b)
    if bnorm == 0:
        return np.zeros_like(b)
    x, info = spla.bicgstab(A, b, rtol=tol / bnorm, atol=0.0, maxiter=maxiter, M=P,
                            callback=lambda xk: history.append(np.linalg.norm(b - A @ xk)))
    res = np.linalg.norm(b - A @ x)
    if info != 0 or res > tol:
        raise NonConvergenceError(f"BiCGStab stopped with residual {res:.3e} (target {tol:.3e})", history)
    return x


def reduce_dirichlet(A, b, fixed, values):
    """Eliminate fixed dofs symmetrically, moving known values to the right-hand side.

    Returns ``(A_ff, b_f, free)``.
    """
    n = A.shape[0]
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    A = sp.csr_matrix(A)
    x_fixed = np.zeros(n)
    x_fixed[fixed] = values
    rhs = b - A @ x_fixed
    return A[free][:, free], rhs[free], free


def write_coo(path, A):
    """Dump a sparse matrix as ``row col value`` lines (0-based)."""
    A = sp.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write(f"% {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {v:.17g}\n")
