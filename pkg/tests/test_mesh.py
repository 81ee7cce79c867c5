import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netmorph import mesh as meshlib
from netmorph.mesh import DIRICHLET, NEUMANN, MeshError


@pytest.mark.parametrize("n, nt, nv", [(1, 2, 4), (2, 8, 9), (5, 50, 36)])
def test_unit_square_counts(n, nt, nv):
    m = meshlib.generate_unit_square(n)
    assert (m.n_triangles, m.n_vertices) == (nt, nv)
    m.check()


def test_unit_square_sizes():
    m = meshlib.generate_unit_square(4)
    np.testing.assert_allclose(m.areas, 1 / 32, rtol=1e-14)
    assert m.h == pytest.approx(1 / math.sqrt(32), rel=1e-14)
    assert set(m.boundary_tags) == {DIRICHLET}


def test_unit_square_rejects_zero():
    with pytest.raises(MeshError):
        meshlib.generate_unit_square(0)


@pytest.mark.parametrize("h", [0.5, 0.2, 0.1, 0.05])
def test_diamond_invariants(h):
    m = meshlib.generate_diamond(h)
    m.check()
    assert m.area == pytest.approx(2.5, rel=1e-12)
    assert h / 2 <= m.h <= 2 * h
    assert m.h_T.max() / m.h_T.min() <= 4
    for e, tag in zip(m.boundary_edges, m.boundary_tags):
        a, b = m.vertices[m.edges[e]]
        on_cut = abs(a[0]) < 1e-12 and abs(b[0]) < 1e-12
        assert tag == (DIRICHLET if on_cut else NEUMANN)


def test_diamond_vertex_scaling():
    coarse = meshlib.generate_diamond(0.5)
    fine = meshlib.generate_diamond(0.05)
    ratio = fine.n_vertices / coarse.n_vertices
    # about (0.5/0.05)^2 = 100, up to boundary and rounding effects
    assert 30 < ratio < 300


def test_diamond_rejects_huge_h():
    with pytest.raises(MeshError):
        meshlib.generate_diamond(10.0)
    with pytest.raises(MeshError):
        meshlib.generate_diamond(0.0)


def test_cut_plane_is_dirichlet():
    m = meshlib.generate_diamond(0.1)
    x = m.vertices[m.dirichlet_vertices, 0]
    np.testing.assert_allclose(x, 0.0, atol=1e-14)
    assert len(m.dirichlet_edges) > 0


def test_refine_counts_and_sizes():
    m = meshlib.generate_unit_square(1)
    r1 = meshlib.refine_uniform(m)
    r2 = meshlib.refine_uniform(r1)
    assert r1.n_triangles == 8 and r2.n_triangles == 32
    np.testing.assert_allclose(np.sort(r1.h_T), np.sort(np.repeat(m.h_T, 4)) / 2, rtol=1e-14)
    r2.check()


def test_refine_inherits_markers():
    m = meshlib.generate_diamond(0.25)
    r = meshlib.refine_uniform(m)
    r.check()
    assert len(r.dirichlet_edges) == 2 * len(m.dirichlet_edges)
    assert len(r.neumann_edges) == 2 * len(m.neumann_edges)
    assert r.area == pytest.approx(m.area, rel=1e-12)


def test_edge_signs_opposite():
    m = meshlib.generate_diamond(0.2)
    interior = np.flatnonzero(m.edge_triangles[:, 1] >= 0)
    t0, t1 = m.edge_triangles[interior].T
    s0 = np.array([m.edge_signs[t, list(m.tri_edges[t]).index(e)] for t, e in zip(t0, interior)])
    s1 = np.array([m.edge_signs[t, list(m.tri_edges[t]).index(e)] for t, e in zip(t1, interior)])
    assert np.all(s0 == -s1)


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError):
        meshlib.Mesh(np.array([[0, 0], [1, 0], [2, 0.0]]), np.array([[0, 1, 2]]))


def test_clockwise_triangle_reoriented_or_rejected():
    v = np.array([[0, 0], [1, 0], [0, 1.0]])
    try:
        m = meshlib.Mesh(v, np.array([[0, 2, 1]]))
    except MeshError:
        return
    m.check()


def test_mesh_file_roundtrip(tmp_path):
    m = meshlib.generate_diamond(0.2)
    path = tmp_path / "diamond.txt"
    meshlib.write_mesh(m, path)
    back = meshlib.read_mesh(path)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    assert list(back.boundary_tags) == list(m.boundary_tags)
    first = path.read_text().splitlines()[:3]
    assert first == [f"vertices {m.n_vertices}", f"triangles {m.n_triangles}", f"boundary {len(m.boundary_edges)}"]


def test_mesh_file_malformed(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("vertices 3\ntriangles 1\n")
    with pytest.raises(MeshError):
        meshlib.read_mesh(p)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 6), levels=st.integers(0, 2))
def test_area_preserved_under_refinement(n, levels):
    m = meshlib.generate_unit_square(n)
    for _ in range(levels):
        m = meshlib.refine_uniform(m)
    m.check()
    assert m.areas.sum() == pytest.approx(1.0, rel=1e-12)
    assert m.h_T.max() / m.h_T.min() <= 4
