"""
Triangle meshes of a flow channel with an obstacle hole.

The discrete fluid domain is the tunnel rectangle minus the closed obstacle
rectangle.  Meshes are immutable values: every operation returns a new
:class:`TriMesh`.

Examples
--------

>>> from winfshape.mesh import generate_channel_mesh, refine_uniform
>>> m = generate_channel_mesh((-1, 1, -1, 1), (-0.25, 0.25, -0.25, 0.25), 8)
>>> refine_uniform(m).n_cells == 4 * m.n_cells
True
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

INFLOW, OUTFLOW, WALL, OBSTACLE = 1, 2, 3, 4

#: marker name -> integer code used in :attr:`TriMesh.markers`
MARKERS = {"inflow": INFLOW, "outflow": OUTFLOW, "wall": WALL, "obstacle": OBSTACLE}
MARKER_NAMES = {v: k for k, v in MARKERS.items()}

#: markers of the fixed hold-all boundary
OUTER_MARKERS = ("inflow", "outflow", "wall")


class MeshError(ValueError):
    """Invalid mesh input or geometry."""


class GeometryError(MeshError):
    """Obstacle touches or leaves the tunnel."""


class InversionError(MeshError):
    """A deformation produced a cell with non-positive signed area."""

    def __init__(self, cell, det):
        self.cell = int(cell)
        self.det = float(det)
        super().__init__(f"cell {self.cell} inverted (det(I+Du) = {self.det:.3e})")


def marker_code(name):
    try:
        return MARKERS[name.lower()]
    except (KeyError, AttributeError):
        raise MeshError(f"unknown boundary marker {name!r}") from None


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation with marked boundary edges.

    Parameters
    ----------
    vertices : (N, 2) float array
    cells : (M, 3) int array, counter-clockwise vertex triples
    boundary : (K, 2) int array of boundary edge vertex pairs
    markers : (K,) int array of marker codes (see :data:`MARKERS`)
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    markers: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        c = np.ascontiguousarray(self.cells, dtype=np.int64)
        b = np.ascontiguousarray(self.boundary, dtype=np.int64).reshape(-1, 2)
        mk = np.ascontiguousarray(self.markers, dtype=np.int64).ravel()
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if c.ndim != 2 or c.shape[1] != 3:
            raise MeshError("cells must have shape (M, 3)")
        if len(b) != len(mk):
            raise MeshError("boundary and markers differ in length")
        if c.size and (c.min() < 0 or c.max() >= len(v)):
            raise MeshError("cell references a missing vertex")
        for arr in (v, c, b, mk):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "cells", c)
        object.__setattr__(self, "boundary", b)
        object.__setattr__(self, "markers", mk)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    # -- geometry ---------------------------------------------------------

    @cached_property
    def signed_areas(self):
        p = self.vertices[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self):
        return self.signed_areas

    @cached_property
    def barycentric_gradients(self):
        """(M, 3, 2) gradients of the three barycentric coordinates per cell."""
        p = self.vertices[self.cells]
        two_a = 2.0 * self.signed_areas
        g = np.empty((self.n_cells, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            g[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / two_a
            g[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / two_a
        return g

    @cached_property
    def centroids(self):
        return self.vertices[self.cells].mean(axis=1)

    # -- topology ---------------------------------------------------------

    @cached_property
    def _edge_data(self):
        # local edge a is opposite local vertex a
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        all_e = np.sort(self.cells[:, loc].reshape(-1, 2), axis=1)
        edges, inv = np.unique(all_e, axis=0, return_inverse=True)
        return edges, inv.reshape(-1, 3)

    @property
    def edges(self):
        """(E, 2) sorted unique edges."""
        return self._edge_data[0]

    @property
    def cell_edges(self):
        """(M, 3) edge index opposite each local vertex."""
        return self._edge_data[1]

    def boundary_edge_ids(self, markers):
        """Indices into :attr:`edges` of boundary edges carrying the given markers."""
        codes = [marker_code(m) if isinstance(m, str) else int(m) for m in markers]
        sel = np.isin(self.markers, codes)
        b = np.sort(self.boundary[sel], axis=1)
        if not len(b):
            return np.zeros(0, dtype=np.int64)
        key_e = self.edges[:, 0] * self.n_vertices + self.edges[:, 1]
        key_b = b[:, 0] * self.n_vertices + b[:, 1]
        idx = np.searchsorted(key_e, key_b)
        if np.any(idx >= len(key_e)) or np.any(key_e[np.minimum(idx, len(key_e) - 1)] != key_b):
            raise MeshError("boundary edge not present in the triangulation")
        return idx

    def marked_vertices(self, markers):
        codes = [marker_code(m) if isinstance(m, str) else int(m) for m in markers]
        sel = np.isin(self.markers, codes)
        return np.unique(self.boundary[sel])

    @cached_property
    def obstacle_vertices(self):
        return self.marked_vertices(["obstacle"])

    @cached_property
    def outer_vertices(self):
        return self.marked_vertices(OUTER_MARKERS)

    @cached_property
    def obstacle_cells(self):
        """Boolean mask of cells having at least one vertex on the obstacle."""
        on = np.zeros(self.n_vertices, dtype=bool)
        on[self.obstacle_vertices] = True
        return on[self.cells].any(axis=1)

    def with_vertices(self, vertices):
        moved = TriMesh(vertices, self.cells, self.boundary, self.markers)
        if "_edge_data" in self.__dict__:
            moved.__dict__["_edge_data"] = self._edge_data
        return moved

    def validate(self):
        """Check positive cell areas and closed boundary loops."""
        if np.any(self.signed_areas <= 0):
            bad = int(np.argmin(self.signed_areas))
            raise MeshError(f"cell {bad} has non-positive area {self.signed_areas[bad]:.3e}")
        deg = np.bincount(self.boundary.ravel(), minlength=self.n_vertices)
        if np.any(deg[np.unique(self.boundary)] != 2):
            raise MeshError("boundary edges do not form closed loops")
        # every edge used by exactly one cell must be a boundary edge
        counts = np.bincount(self.cell_edges.ravel(), minlength=self.n_edges)
        if (counts == 1).sum() != len(self.boundary):
            raise MeshError("boundary edge list does not match the triangulation")
        return self


# -- generation --------------------------------------------------------------


def _graded_spacing(gap, h, count):
    """Cumulative offsets of ``count`` cells covering ``gap``, first cell near ``h``."""
    if count < 1:
        raise MeshError("layer count must be positive")
    target = gap / h

    def total(r):
        if abs(r - 1.0) < 1e-12:
            return count - target
        return (r ** count - 1.0) / (r - 1.0) - target

    if abs(target - count) < 1e-12:
        ratio = 1.0
    else:
        lo, hi = (1.0 + 1e-12, 4.0) if target > count else (0.05, 1.0 - 1e-12)
        ratio = brentq(total, lo, hi, xtol=1e-15)
    sizes = ratio ** np.arange(count)
    offsets = np.concatenate([[0.0], np.cumsum(sizes)])
    return gap * offsets / offsets[-1]


def _layer_count(gap, h, growth):
    if growth <= 1.0:
        return max(1, int(round(gap / h)))
    c = np.log1p(gap / h * (growth - 1.0)) / np.log(growth)
    return max(1, int(round(c)))


def generate_channel_mesh(tunnel, obstacle, resolution, layers=None, growth=1.07):
    """Structured triangulation of a rectangular tunnel minus a rectangular obstacle.

    The tunnel is split into a 3x3 block grid whose centre block is the
    obstacle.  Obstacle sides carry uniform edges (``resolution`` in total);
    the eight surrounding blocks are tensor grids graded geometrically away
    from the obstacle.  Each quadrilateral is cut along the diagonal pointing
    away from the obstacle centre, which keeps the mesh mirror symmetric.

    Parameters
    ----------
    tunnel, obstacle : tuple (x0, x1, y0, y1)
    resolution : int
        Number of edges on the obstacle boundary, a multiple of 4 and >= 8.
        Edges are distributed over the sides in proportion to their length.
    layers : tuple (left, right, bottom, top), optional
        Cell counts of the graded blocks.  Derived from ``growth`` if omitted.
    growth : float
        Target geometric growth factor of the graded blocks.

    Returns
    -------
    TriMesh
    """
    tx0, tx1, ty0, ty1 = map(float, tunnel)
    ox0, ox1, oy0, oy1 = map(float, obstacle)
    if int(resolution) != resolution or resolution < 8 or resolution % 4:
        raise MeshError("resolution must be an integer multiple of 4 and >= 8")
    resolution = int(resolution)
    if not (tx1 > tx0 and ty1 > ty0 and ox1 > ox0 and oy1 > oy0):
        raise MeshError("degenerate rectangle")
    if not (tx0 < ox0 and ox1 < tx1 and ty0 < oy0 and oy1 < ty1):
        raise GeometryError("obstacle must lie strictly inside the tunnel")

    wx, wy = ox1 - ox0, oy1 - oy0
    nx = int(round(resolution / 2 * wx / (wx + wy)))
    nx = min(max(nx, 1), resolution // 2 - 1)
    ny = resolution // 2 - nx
    h = min(wx / nx, wy / ny)

    gaps = (ox0 - tx0, tx1 - ox1, oy0 - ty0, ty1 - oy1)
    if layers is None:
        layers = tuple(_layer_count(g, h, growth) for g in gaps)
    layers = tuple(int(c) for c in layers)
    nl, nr, nb, nt = layers

    xs = np.concatenate([
        ox0 - _graded_spacing(gaps[0], h, nl)[::-1],
        ox0 + wx * np.arange(1, nx) / nx,
        ox1 + _graded_spacing(gaps[1], h, nr),
    ])
    ys = np.concatenate([
        oy0 - _graded_spacing(gaps[2], h, nb)[::-1],
        oy0 + wy * np.arange(1, ny) / ny,
        oy1 + _graded_spacing(gaps[3], h, nt),
    ])
    xs[0], xs[-1], ys[0], ys[-1] = tx0, tx1, ty0, ty1
    xs[nl], xs[nl + nx], ys[nb], ys[nb + ny] = ox0, ox1, oy0, oy1

    NX, NY = len(xs), len(ys)
    # grid nodes strictly inside the obstacle are dropped
    inside = np.zeros((NY, NX), dtype=bool)
    inside[nb + 1:nb + ny, nl + 1:nl + nx] = True
    node_id = -np.ones((NY, NX), dtype=np.int64)
    node_id[~inside] = np.arange((~inside).sum())
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx[~inside], gy[~inside]])

    ci, cj = np.meshgrid(np.arange(NX - 1), np.arange(NY - 1))
    ci, cj = ci.ravel(), cj.ravel()
    keep = ~((ci >= nl) & (ci < nl + nx) & (cj >= nb) & (cj < nb + ny))
    ci, cj = ci[keep], cj[keep]
    n00 = node_id[cj, ci]
    n10 = node_id[cj, ci + 1]
    n11 = node_id[cj + 1, ci + 1]
    n01 = node_id[cj + 1, ci]
    cx = 0.5 * (xs[ci] + xs[ci + 1]) - 0.5 * (ox0 + ox1)
    cy = 0.5 * (ys[cj] + ys[cj + 1]) - 0.5 * (oy0 + oy1)
    main = (cx >= 0) == (cy >= 0)
    t1 = np.where(main[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n10, n01]))
    t2 = np.where(main[:, None], np.column_stack([n00, n11, n01]), np.column_stack([n10, n11, n01]))
    cells = np.vstack([t1, t2])

    bnd, mk = [], []

    def chain(ids, marker):
        for a, b in zip(ids[:-1], ids[1:]):
            bnd.append((a, b))
            mk.append(marker)

    chain(node_id[0, :], WALL)
    chain(node_id[-1, :], WALL)
    chain(node_id[:, 0], INFLOW)
    chain(node_id[:, -1], OUTFLOW)
    chain(node_id[nb, nl:nl + nx + 1], OBSTACLE)
    chain(node_id[nb + ny, nl:nl + nx + 1], OBSTACLE)
    chain(node_id[nb:nb + ny + 1, nl], OBSTACLE)
    chain(node_id[nb:nb + ny + 1, nl + nx], OBSTACLE)

    mesh = TriMesh(vertices, cells, np.array(bnd), np.array(mk))
    return _orient(mesh).validate()


def rectangle_mesh(x0, x1, y0, y1, nx, ny, markers=None):
    """Uniform criss-cross-free triangulation of a rectangle without hole.

    ``markers`` maps side names ``left/right/bottom/top`` to boundary marker
    names; the default is a channel with inflow on the left, outflow on the
    right and walls elsewhere.
    """
    markers = markers or {"left": "inflow", "right": "outflow", "bottom": "wall", "top": "wall"}
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    nid = np.arange(len(vertices)).reshape(ny + 1, nx + 1)
    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    ci, cj = ci.ravel(), cj.ravel()
    n00, n10 = nid[cj, ci], nid[cj, ci + 1]
    n01, n11 = nid[cj + 1, ci], nid[cj + 1, ci + 1]
    cells = np.vstack([np.column_stack([n00, n10, n11]), np.column_stack([n00, n11, n01])])
    bnd, mk = [], []
    for side, ids in (("bottom", nid[0]), ("top", nid[-1]), ("left", nid[:, 0]), ("right", nid[:, -1])):
        code = marker_code(markers[side])
        bnd += list(zip(ids[:-1], ids[1:]))
        mk += [code] * (len(ids) - 1)
    return _orient(TriMesh(vertices, cells, np.array(bnd), np.array(mk))).validate()


def _orient(mesh):
    neg = mesh.signed_areas < 0
    if not neg.any():
        return mesh
    cells = mesh.cells.copy()
    cells[neg] = cells[neg][:, [0, 2, 1]]
    return TriMesh(mesh.vertices, cells, mesh.boundary, mesh.markers)


def refine_uniform(mesh, times=1):
    """Split every cell into four through its edge midpoints."""
    for _ in range(times):
        nv = mesh.n_vertices
        mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        vertices = np.vstack([mesh.vertices, mids])
        c = mesh.cells
        e = mesh.cell_edges + nv  # e[:, a] is the midpoint opposite vertex a
        cells = np.vstack([
            np.column_stack([c[:, 0], e[:, 2], e[:, 1]]),
            np.column_stack([e[:, 2], c[:, 1], e[:, 0]]),
            np.column_stack([e[:, 1], e[:, 0], c[:, 2]]),
            np.column_stack([e[:, 0], e[:, 1], e[:, 2]]),
        ])
        key_e = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
        bs = np.sort(mesh.boundary, axis=1)
        bmid = np.searchsorted(key_e, bs[:, 0] * nv + bs[:, 1]) + nv
        boundary = np.vstack([
            np.column_stack([mesh.boundary[:, 0], bmid]),
            np.column_stack([bmid, mesh.boundary[:, 1]]),
        ])
        markers = np.concatenate([mesh.markers, mesh.markers])
        mesh = TriMesh(vertices, cells, boundary, markers)
    return mesh


# -- deformation and quality -------------------------------------------------


def deformation_gradient(mesh, u):
    """Cellwise constant Jacobian ``Du`` of a P1 field, shape (M, 2, 2).

    ``Du[m, i, j]`` is the derivative of component ``i`` in direction ``j``.
    """
    u = as_vertex_field(mesh, u)
    return np.matmul(u[mesh.cells].transpose(0, 2, 1), mesh.barycentric_gradients)


def as_vertex_field(mesh, u):
    """Accept an (N, 2) array or a blocked coefficient vector of length 2N."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        if u.size != 2 * mesh.n_vertices:
            raise MeshError("deformation vector has the wrong length")
        return u.reshape(2, -1).T
    if u.shape != (mesh.n_vertices, 2):
        raise MeshError("deformation field has the wrong shape")
    return u


def min_det(mesh, u):
    """Smallest det(I + Du) over cells and the cell attaining it."""
    du = deformation_gradient(mesh, u)
    det = (1 + du[:, 0, 0]) * (1 + du[:, 1, 1]) - du[:, 0, 1] * du[:, 1, 0]
    k = int(np.argmin(det))
    return float(det[k]), k


def apply_deformation(mesh, u, check_boundary=True):
    """Return the mesh with vertices moved to ``x + u(x)``.

    Raises
    ------
    MeshError
        If ``u`` does not vanish on the tunnel boundary.
    InversionError
        If a deformed cell has non-positive signed area.
    """
    u = as_vertex_field(mesh, u)
    if check_boundary and len(mesh.outer_vertices):
        if np.any(u[mesh.outer_vertices] != 0.0):
            raise MeshError("deformation must vanish on the tunnel boundary")
    det, k = min_det(mesh, u)
    if det <= 0:
        raise InversionError(k, det)
    return mesh.with_vertices(mesh.vertices + u)


@dataclass(frozen=True)
class QualityReport:
    edge_length_ratio: float
    min_det_DF: float
    min_cell_angle: float


def _obstacle_edge_lengths(mesh, vertices):
    sel = mesh.markers == OBSTACLE
    b = mesh.boundary[sel]
    return np.linalg.norm(vertices[b[:, 1]] - vertices[b[:, 0]], axis=1)


def edge_length_ratio(mesh, u=None):
    """Longest over shortest obstacle edge, optionally after moving by ``u``."""
    v = mesh.vertices if u is None else mesh.vertices + as_vertex_field(mesh, u)
    lengths = _obstacle_edge_lengths(mesh, v)
    if not len(lengths):
        return 1.0
    return float(lengths.max() / lengths.min())


def quality_report(mesh, u=None):
    v = mesh.vertices if u is None else mesh.vertices + as_vertex_field(mesh, u)
    ratio = edge_length_ratio(mesh, u)
    mdet = 1.0 if u is None else min_det(mesh, u)[0]
    p = v[mesh.cells]
    angles = []
    for a in range(3):
        e1 = p[:, (a + 1) % 3] - p[:, a]
        e2 = p[:, (a + 2) % 3] - p[:, a]
        cosang = np.einsum("mi,mi->m", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return QualityReport(ratio, mdet, float(np.min(angles)))


def obstacle_measures(mesh):
    """Area of the fluid domain and its barycenter."""
    a = mesh.signed_areas
    area = float(a.sum())
    bary = (a[:, None] * mesh.centroids).sum(axis=0) / area
    return area, bary


def hole_measures(mesh):
    """Area and barycenter of the obstacle, from its boundary polygon."""
    N = mesh.n_vertices
    c = mesh.cells
    directed = np.concatenate([c[:, 0] * N + c[:, 1], c[:, 1] * N + c[:, 2], c[:, 2] * N + c[:, 0]])
    e = mesh.boundary[mesh.markers == OBSTACLE]
    if not len(e):
        return 0.0, np.zeros(2)
    # orient every edge with the fluid on its left; the hole is then traversed clockwise
    ccw = np.isin(e[:, 0] * N + e[:, 1], directed)
    e = np.where(ccw[:, None], e, e[:, ::-1])
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    area = -0.5 * cross.sum()
    bary = -(cross[:, None] * (p + q)).sum(axis=0) / (6.0 * area)
    return float(area), bary
