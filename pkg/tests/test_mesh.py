import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sthdg.mesh import (MeshError, SpaceTimeLayout, SpatialMesh, TopologyError, build_face_topology,
                        build_uniform_mesh, check_conforming, mesh_metrics, read_mesh,
                        refine_uniform, write_mesh)


@pytest.mark.parametrize("n, ne, nv", [(1, 2, 4), (2, 8, 9), (4, 32, 25)])
def test_uniform_counts(n, ne, nv):
    m = build_uniform_mesh(n)
    assert m.n_elements == ne and m.n_vertices == nv
    assert np.all(m.signed_areas() > 0)


def test_area_partition():
    for n in (1, 3, 4, 7):
        m = build_uniform_mesh(n)
        assert abs(m.signed_areas().sum() - 1.0) <= 1e-14
    m = build_uniform_mesh(3, domain=((-1.0, 2.0), (0.5, 1.0)))
    assert np.isclose(m.signed_areas().sum(), 1.5, rtol=1e-12)


def test_refinement():
    m = build_uniform_mesh(1)
    r = refine_uniform(m)
    assert r.n_elements == 8
    assert abs(r.h / m.h - 0.5) <= 1e-14
    assert abs(r.signed_areas().sum() - 1.0) <= 1e-12
    check_conforming(r)
    a = mesh_metrics(m, build_face_topology(m))
    b = mesh_metrics(r, build_face_topology(r))
    for key in ("shape_regularity", "quasi_uniformity", "C_e", "C^e"):
        assert np.isclose(a[key], b[key], rtol=1e-12)


def test_two_triangle_topology():
    m = build_uniform_mesh(1)
    f = build_face_topology(m)
    assert len(f.interior) == 1 and len(f.boundary) == 4


def _edge_count(mesh):
    edges = set()
    for tri in mesh.triangles.tolist():
        for j in range(3):
            edges.add(tuple(sorted((tri[j], tri[(j + 1) % 3]))))
    return len(edges)


@pytest.mark.parametrize("n", [1, 2, 4, 5])
def test_face_counts_and_skeleton(n):
    m = build_uniform_mesh(n)
    f = build_face_topology(m)
    # Euler: V - E + F = 1 for a simply connected planar triangulation
    assert f.n_faces == _edge_count(m) == m.n_vertices + m.n_elements - 1
    assert len(f.boundary) == 4 * n
    per_elem = m.edge_lengths().sum()
    skeleton = f.length[f.interior].sum() * 2 + f.length[f.boundary].sum()
    assert np.isclose(per_elem, skeleton, rtol=1e-12)
    # each interior face seen by two elements, each boundary face by one
    counts = np.bincount(f.element_faces.ravel(), minlength=f.n_faces)
    assert np.all(counts[f.interior] == 2) and np.all(counts[f.boundary] == 1)


def test_normals():
    m = build_uniform_mesh(3)
    f = build_face_topology(m)
    assert np.allclose(np.linalg.norm(f.normal, axis=1), 1.0, atol=1e-14)
    assert np.all(f.left[f.interior] < f.right[f.interior])
    # left normal points out of the left element: towards the right centroid
    c = m.vertices[m.triangles].mean(axis=1)
    mid = m.vertices[f.vertices].mean(axis=1)
    i = f.interior
    assert np.all(np.einsum("fd,fd->f", f.normal[i], c[f.right[i]] - mid[i]) > 0)
    assert np.all(np.einsum("fd,fd->f", f.normal[i], c[f.left[i]] - mid[i]) < 0)
    b = f.boundary
    assert np.all(np.einsum("fd,fd->f", f.normal[b], mid[b] - c[f.left[b]]) > 0)


def test_right_triangle_metrics():
    m = SpatialMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    assert np.isclose(m.diameters()[0], np.sqrt(2), rtol=1e-15)
    assert np.isclose(m.inradii()[0], (2 - np.sqrt(2)) / 2, rtol=1e-14)


def test_uniform_quasi_uniformity():
    m = build_uniform_mesh(4)
    met = mesh_metrics(m, build_face_topology(m))
    assert met["quasi_uniformity"] == 1.0
    assert met["C_e"] <= met["C^e"]


@settings(max_examples=25, deadline=None)
@given(rot=st.floats(0, 2 * np.pi), sx=st.floats(-5, 5), sy=st.floats(-5, 5), n=st.integers(1, 4))
def test_metrics_rigid_invariance(rot, sx, sy, n):
    m = build_uniform_mesh(n)
    a = mesh_metrics(m, build_face_topology(m))
    mt = m.transformed(rot, (sx, sy))
    b = mesh_metrics(mt, build_face_topology(mt))
    for key in ("h", "h_min", "shape_regularity", "quasi_uniformity", "C_e", "C^e"):
        assert np.isclose(a[key], b[key], rtol=1e-12)


def test_invalid_meshes():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    with pytest.raises(MeshError):
        check_conforming(SpatialMesh(v, np.array([[0, 2, 1]])))          # clockwise
    with pytest.raises(MeshError):
        SpatialMesh(v, np.array([[0, 1, 7]]))
    # hanging node: vertex 4 in the middle of the edge shared (geometrically) by two triangles
    v2 = np.array([[0, 0], [2, 0], [0, 2], [2, 2], [1, 1]], dtype=float)
    with pytest.raises(MeshError):
        check_conforming(SpatialMesh(v2, np.array([[0, 1, 4], [1, 3, 4], [0, 4, 2], [1, 3, 2]])))
    with pytest.raises(TopologyError):
        build_face_topology(SpatialMesh(v, np.array([[0, 1, 2], [1, 3, 2], [1, 2, 3]])))


def test_mesh_file_roundtrip(tmp_path):
    m = refine_uniform(build_uniform_mesh(2))
    write_mesh(m, tmp_path / "m.txt")
    r = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.triangles, m.triangles)
    (tmp_path / "bad.txt").write_text("tri-mesh 2\n3\n0 0\n")
    with pytest.raises(MeshError):
        read_mesh(tmp_path / "bad.txt")


def test_layout():
    lay = SpaceTimeLayout.uniform(2.0, 8)
    assert lay.n_slabs == 8 and np.isclose(lay.tau, 0.25)
    assert lay.slab(3) == pytest.approx((0.75, 1.0))
    with pytest.raises(ValueError):
        SpaceTimeLayout(np.array([0.0, 0.5, 0.4]))
