"""
Plain-text mesh files and legacy VTK output.

The mesh format is line oriented::

    # winfshape mesh
    vertices <N>
    <x> <y>            (N lines)
    cells <M>
    <a> <b> <c>        (M lines, zero based)
    boundary <K>
    <a> <b> <marker>   (K lines, marker names)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import MARKER_NAMES, MeshError, TriMesh, marker_code

HEADER = "# winfshape mesh"


def write_mesh(path, mesh):
    path = Path(path)
    with path.open("w") as fh:
        fh.write(HEADER + "\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"cells {mesh.n_cells}\n")
        np.savetxt(fh, mesh.cells, fmt="%d")
        fh.write(f"boundary {len(mesh.boundary)}\n")
        for (a, b), m in zip(mesh.boundary, mesh.markers):
            fh.write(f"{a} {b} {MARKER_NAMES[int(m)]}\n")
    return path


def read_mesh(path):
    """Parse a file written by :func:`write_mesh`.

    Raises
    ------
    MeshError
        With the offending line number on malformed input.
    """
    lines = Path(path).read_text().splitlines()
    pos = 0

    def section(name):
        nonlocal pos
        while pos < len(lines) and (not lines[pos].strip() or lines[pos].startswith("#")):
            pos += 1
        if pos >= len(lines):
            raise MeshError(f"{path}: missing section {name!r}")
        head = lines[pos].split()
        if len(head) != 2 or head[0] != name or not head[1].isdigit():
            raise MeshError(f"{path}:{pos + 1}: expected '{name} <count>'")
        n = int(head[1])
        body = lines[pos + 1:pos + 1 + n]
        if len(body) != n:
            raise MeshError(f"{path}: section {name!r} is truncated")
        start = pos + 2
        pos += n + 1
        return [(start + i, ln.split()) for i, ln in enumerate(body)]

    try:
        verts = [(float(t[0]), float(t[1])) for _, t in section("vertices")]
        cells = [tuple(int(x) for x in t) for _, t in section("cells")]
        rows = section("boundary")
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed entry ({exc})") from None
    boundary, markers = [], []
    for lineno, t in rows:
        if len(t) != 3:
            raise MeshError(f"{path}:{lineno}: expected '<a> <b> <marker>'")
        try:
            boundary.append((int(t[0]), int(t[1])))
            markers.append(marker_code(t[2]))
        except (KeyError, ValueError) as exc:
            raise MeshError(f"{path}:{lineno}: {exc}") from None
    return TriMesh(np.array(verts).reshape(-1, 2), np.array(cells, dtype=np.int64).reshape(-1, 3),
                   np.array(boundary, dtype=np.int64).reshape(-1, 2), np.array(markers, dtype=np.int64))


def write_vtk(path, mesh, point_data=None, cell_data=None, title="winfshape"):
    """Write an unstructured-grid legacy ASCII VTK file.

    ``point_data`` and ``cell_data`` map names to arrays of shape (n,) or
    (n, 2); two-component arrays are written as 3D vectors with zero z.
    """
    path = Path(path)
    N, M = mesh.n_vertices, mesh.n_cells

    def block(fh, n, data):
        for name, arr in (data or {}).items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != n:
                raise ValueError(f"field {name!r} has {arr.shape[0]} entries, expected {n}")
            if arr.ndim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, arr, fmt="%.17g")
            else:
                fh.write(f"VECTORS {name} double\n")
                np.savetxt(fh, np.column_stack([arr, np.zeros(n)]), fmt="%.17g")

    with path.open("w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {N} double\n")
        np.savetxt(fh, np.column_stack([mesh.vertices, np.zeros(N)]), fmt="%.17g")
        fh.write(f"CELLS {M} {4 * M}\n")
        np.savetxt(fh, np.column_stack([np.full(M, 3), mesh.cells]), fmt="%d")
        fh.write(f"CELL_TYPES {M}\n")
        np.savetxt(fh, np.full(M, 5), fmt="%d")
        if point_data:
            fh.write(f"POINT_DATA {N}\n")
            block(fh, N, point_data)
        if cell_data:
            fh.write(f"CELL_DATA {M}\n")
            block(fh, M, cell_data)
    return path
