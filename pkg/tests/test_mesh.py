import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdg.errors import ConfigurationError, LocationError, StructuralError, TangledMeshError
from mmdg.mesh import (CORNER, EDGE, INTERIOR, SimplicialMesh, Topology, build_cross_triangulated_rectangle,
                       build_interval_mesh, check_volume_partition, face_connectivity, geometry, locate_point,
                       locate_points, read_mesh_csv, write_mesh_csv)

from helpers import jiggle


# ------------------------------------------------------------------ builders
def test_interval_mesh_uniform():
    m = build_interval_mesh(0.0, 1.0, 4)
    assert np.allclose(m.vertices[:, 0], [0, 0.25, 0.5, 0.75, 1])
    assert m.n_elements == 4


def test_interval_single_element():
    g = build_interval_mesh(0.0, 10.0, 1).geometry()
    assert g.volumes.tolist() == [10.0]


def test_interval_altitude():
    assert build_interval_mesh(-10.0, 10.0, 100).geometry().a_min == pytest.approx(0.2, rel=1e-12)


@pytest.mark.parametrize("args", [(0.0, 1.0, 0), (0.0, 1.0, -3), (1.0, 1.0, 3), (2.0, 1.0, 3)])
def test_interval_rejects_bad_input(args):
    with pytest.raises(ConfigurationError):
        build_interval_mesh(*args)


def test_interval_boundary_flags():
    kind = build_interval_mesh(0.0, 1.0, 5).topology.vertex_kind
    assert kind[0] == CORNER and kind[-1] == CORNER
    assert np.all(kind[1:-1] == INTERIOR)


def test_cross_mesh_counts():
    m = build_cross_triangulated_rectangle((0, 1), (0, 1), 10, 10)
    assert m.n_elements == 400
    assert m.n_vertices == 121 + 100


def test_cross_mesh_single_cell():
    m = build_cross_triangulated_rectangle((0, 1), (0, 1), 1, 1)
    g = m.geometry()
    assert np.allclose(g.volumes, 0.25, rtol=0, atol=1e-15)
    # congruent: identical sorted edge lengths
    X = m.vertices[m.elements]
    lens = np.sort(np.linalg.norm(X - np.roll(X, 1, axis=1), axis=2), axis=1)
    assert np.allclose(lens, lens[0])


def test_cross_mesh_paper_size():
    m = build_cross_triangulated_rectangle((-1, 2), (0, 1), 150, 50)
    assert m.n_elements == 30000


def test_cross_mesh_vertex_kinds():
    m = build_cross_triangulated_rectangle((0, 2), (0, 1), 4, 2)
    kind = m.topology.vertex_kind
    X = m.vertices
    on_x = np.isclose(X[:, 0], 0) | np.isclose(X[:, 0], 2)
    on_y = np.isclose(X[:, 1], 0) | np.isclose(X[:, 1], 1)
    assert np.all(kind[on_x & on_y] == CORNER)
    assert np.all(kind[on_x ^ on_y] == EDGE)
    assert np.all(kind[~on_x & ~on_y] == INTERIOR)


@pytest.mark.parametrize("rng_", [((0, 0), (0, 1)), ((0, 1), (1, 0))])
def test_cross_mesh_rejects_degenerate(rng_):
    with pytest.raises(ConfigurationError):
        build_cross_triangulated_rectangle(*rng_, 2, 2)


@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.1, 10), st.floats(0.1, 10))
@settings(max_examples=25, deadline=None)
def test_volume_partition(nx, ny, lx, ly):
    m = build_cross_triangulated_rectangle((0, lx), (-ly, 0), nx, ny)
    check_volume_partition(m)
    assert np.all(m.geometry().volumes > 0)
    assert abs(m.geometry().volumes.sum() - lx * ly) <= 1e-12 * lx * ly


# ------------------------------------------------------------------ faces
def test_interval_faces():
    fs = face_connectivity(build_interval_mesh(0.0, 1.0, 4))
    inner = fs.interior
    assert inner.sum() == 3
    assert np.all(np.abs(fs.normals[:, 0]) == 1.0)


def test_single_cell_faces():
    fs = build_cross_triangulated_rectangle((0, 1), (0, 1), 1, 1).faces()
    assert fs.interior.sum() == 4
    assert fs.boundary.sum() == 4


@pytest.mark.parametrize("periodic", [False, True])
@pytest.mark.parametrize("build", [lambda: build_interval_mesh(0, 1, 7),
                                   lambda: build_cross_triangulated_rectangle((0, 2), (0, 1), 3, 2)])
def test_face_consistency(build, periodic):
    m = jiggle(build(), 0.2, 3)
    fs = m.faces(periodic)
    d = m.dim
    assert np.allclose(np.linalg.norm(fs.normals, axis=1), 1.0, atol=1e-14)
    # every element face appears exactly once
    ef = fs.elem_faces
    ids = np.sort(ef[..., 0].ravel() * 2 + ef[..., 1].ravel())
    assert len(np.unique(ids)) == ids.size
    # normal of side L points away from its centroid
    cent = m.geometry().centroids
    mid = m.vertices[fs.verts[:, 0]].mean(axis=1)
    assert np.all(np.sum((mid - cent[fs.elem[:, 0]]) * fs.normals, axis=1) > 0)
    inner = np.flatnonzero(fs.interior)
    # the R element sees the same face, with the opposite outward normal
    for f in inner:
        eR = fs.elem[f, 1]
        midR = m.vertices[fs.verts[f, 1]].mean(axis=0)
        nR = -fs.normals[f]
        assert np.dot(midR - cent[eR], nR) > 0
    if periodic:
        assert fs.boundary.sum() == 0
    for f in inner:
        # measures agree from both sides
        vL = m.vertices[fs.verts[f, 0]]
        vR = m.vertices[fs.verts[f, 1]]
        if d == 2:
            assert abs(np.linalg.norm(vL[1] - vL[0]) - np.linalg.norm(vR[1] - vR[0])) <= 1e-14


def test_periodic_shift():
    m = build_interval_mesh(0, 1, 4)
    fs = m.faces(periodic=True)
    wrap = np.flatnonzero(fs.periodic)
    assert wrap.size == 1
    f = wrap[0]
    xL = m.vertices[fs.verts[f, 0, 0], 0]
    xR = m.vertices[fs.verts[f, 1, 0], 0]
    assert xR == pytest.approx(xL + fs.period_shift[f, 0])


def test_non_manifold_rejected():
    elems = np.array([[0, 1, 2], [0, 1, 3], [1, 0, 4]])
    X = np.array([[0, 0], [1, 0], [0, 1], [0, -1], [1, 1]], float)
    topo = Topology(elems, 5, np.zeros(5, int))
    with pytest.raises(StructuralError):
        SimplicialMesh(X, topo, np.zeros(2), np.ones(2)).faces()


def test_neighbors_symmetric():
    fs = build_cross_triangulated_rectangle((0, 1), (0, 1), 3, 3).faces()
    nb = fs.neighbors()
    for e in range(nb.shape[0]):
        for n in nb[e]:
            if n >= 0:
                assert e in nb[n]


# ------------------------------------------------------------------ geometry
def unit_triangle():
    topo = Topology(np.array([[0, 1, 2]]), 3, np.zeros(3, int))
    return SimplicialMesh(np.array([[0, 0], [1, 0], [0, 1.0]]), topo, np.zeros(2), np.ones(2))


def test_unit_triangle_geometry():
    g = geometry(unit_triangle())
    assert g.volumes[0] == pytest.approx(0.5)
    assert g.a_min == pytest.approx(1 / np.sqrt(2))
    assert g.det[0] == pytest.approx(2 * g.volumes[0])


def test_short_interval_geometry():
    g = geometry(build_interval_mesh(0.0, 0.25, 1))
    assert g.volumes[0] == g.a_min == 0.25


def test_flipped_triangle():
    m = unit_triangle()
    with pytest.raises(TangledMeshError):
        geometry(m.moved(m.vertices[[0, 2, 1]]))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_edge_matrix_identities(seed):
    m = jiggle(build_cross_triangulated_rectangle((0, 1), (0, 1), 3, 2), 0.3, seed)
    g = m.geometry()
    assert np.allclose(g.det, 2 * g.volumes, rtol=1e-13)
    assert np.allclose(g.edge_matrix @ g.inverse, np.eye(2), atol=1e-12)
    assert np.all(g.altitudes > 0)
    # altitude = 2|K| / longest edge
    X = m.vertices[m.elements]
    longest = np.linalg.norm(X - np.roll(X, 1, axis=1), axis=2).max(axis=1)
    assert np.allclose(g.altitudes, 2 * g.volumes / longest)


# ------------------------------------------------------------------ location
def test_locate_centroid():
    m = build_cross_triangulated_rectangle((0, 1), (0, 1), 2, 2)
    e, bary = locate_point(m, m.geometry().centroids[7])
    assert e == 7
    assert np.allclose(bary, 1 / 3)


def test_locate_shared_vertex():
    m = build_cross_triangulated_rectangle((0, 1), (0, 1), 2, 2)
    v = 4  # interior grid node shared by several elements
    e, bary = locate_point(m, m.vertices[v])
    owners = np.flatnonzero((m.elements == v).any(axis=1))
    assert e == owners.min()
    assert np.isclose(bary.max(), 1.0)


@pytest.mark.parametrize("x", [[1.001, 0.5], [0.5, -0.001]])
def test_locate_outside(x):
    with pytest.raises(LocationError):
        locate_point(build_cross_triangulated_rectangle((0, 1), (0, 1), 2, 2), np.array(x))


def test_locate_interval_outside():
    with pytest.raises(LocationError):
        locate_point(build_interval_mesh(0, 1, 4), np.array([1.001]))


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_locate_quadrature_points(seed):
    from mmdg.dgcore import get_basis, reference_to_physical
    m = jiggle(build_cross_triangulated_rectangle((0, 1), (0, 1), 3, 3), 0.3, seed)
    pts = reference_to_physical(m, get_basis(2, 2).quad.points)
    ne, nq, _ = pts.shape
    eid, bary = locate_points(m, pts.reshape(-1, 2))
    assert np.array_equal(eid, np.repeat(np.arange(ne), nq))
    X = m.vertices[m.elements[eid]]
    assert np.allclose(np.einsum("pj,pjd->pd", bary, X), pts.reshape(-1, 2), atol=1e-13)
    assert np.all(bary >= 0) and np.allclose(bary.sum(axis=1), 1)


def test_locate_points_matches_exhaustive():
    m = jiggle(build_cross_triangulated_rectangle((0, 1), (0, 1), 4, 4), 0.3, 1)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (50, 2))
    eid, bary = locate_points(m, pts, seed_vertices=rng.integers(0, m.n_vertices, 50))
    for p, e, b in zip(pts, eid, bary):
        X = m.vertices[m.elements[e]]
        assert np.allclose(b @ X, p, atol=1e-13)


# ------------------------------------------------------------------ I/O
def test_mesh_csv_round_trip(tmp_path):
    m = jiggle(build_cross_triangulated_rectangle((0, 1), (0, 1), 2, 3), 0.2, 5)
    path = tmp_path / "mesh.csv"
    write_mesh_csv(m, path)
    X, E = read_mesh_csv(path)
    assert np.array_equal(X, m.vertices)
    assert np.array_equal(E, m.elements)
    lines = path.read_text().splitlines()
    assert lines[0] == "vertex,x,y"
    assert "element,v0,v1,v2" in lines


def test_moved_mesh_equivalent():
    m = build_interval_mesh(0, 1, 5)
    m2 = jiggle(m, 0.2, 0)
    assert m.equivalent(m2)
    assert not m.equivalent(build_interval_mesh(0, 1, 6))
