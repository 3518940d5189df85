import numpy as np
import pytest

from winfshape.io import read_mesh, write_mesh, write_vtk
from winfshape.mesh import MeshError


def test_mesh_roundtrip_is_exact(tmp_path, coarse_mesh):
    moved = coarse_mesh.with_vertices(coarse_mesh.vertices + 1e-3 * np.sin(coarse_mesh.vertices))
    p = write_mesh(tmp_path / "m.txt", moved)
    back = read_mesh(p)
    np.testing.assert_array_equal(back.vertices, moved.vertices)
    np.testing.assert_array_equal(back.cells, moved.cells)
    np.testing.assert_array_equal(back.boundary, moved.boundary)
    np.testing.assert_array_equal(back.markers, moved.markers)


def _write(tmp_path, text):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    return p


@pytest.mark.parametrize("text, where", [
    ("# winfshape mesh\nverts 1\n0 0\n", ":2:"),
    ("# winfshape mesh\nvertices 3\n0 0\n1 0\n0 1\ncells 1\n0 1 2\nboundary 1\n0 1 roof\n", ":9:"),
    ("# winfshape mesh\nvertices 3\n0 0\n1 0\n0 1\ncells 1\n0 1 2\nboundary 1\n0 1\n", ":9:"),
])
def test_malformed_reports_line(tmp_path, text, where):
    with pytest.raises(MeshError, match=where):
        read_mesh(_write(tmp_path, text))


def test_truncated_and_missing(tmp_path):
    with pytest.raises(MeshError, match="truncated"):
        read_mesh(_write(tmp_path, "vertices 3\n0 0\n"))
    with pytest.raises(MeshError, match="missing section"):
        read_mesh(_write(tmp_path, "vertices 1\n0 0\n"))
    with pytest.raises(MeshError, match="malformed"):
        read_mesh(_write(tmp_path, "vertices 1\n0 x\ncells 0\nboundary 0\n"))


def test_vtk_layout(tmp_path, two_cell_square):
    m = two_cell_square
    p = write_vtk(tmp_path / "a.vtk", m, point_data={"u": np.ones((4, 2)), "s": np.arange(4.0)},
                  cell_data={"area": m.areas})
    lines = p.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[4] == "POINTS 4 double"
    assert lines[5].split() == ["0", "0", "0"]
    i = lines.index("CELLS 2 8")
    assert lines[i + 1].split() == ["3", "0", "1", "2"]
    assert lines[lines.index("CELL_TYPES 2") + 1] == "5"
    j = lines.index("VECTORS u double")
    assert lines[j + 1].split() == ["1", "1", "0"]
    assert "SCALARS s double 1" in lines and "CELL_DATA 2" in lines


def test_vtk_rejects_wrong_length(tmp_path, two_cell_square):
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "a.vtk", two_cell_square, point_data={"u": np.ones(3)})
