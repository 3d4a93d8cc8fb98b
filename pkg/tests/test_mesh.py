import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geonew.mesh import (
    GeometrySpec, Mesh, MeshError, Sideset, boundary_edges, boundary_loops, edges_of, generate_annulus_polygon,
    generate_rectangle, load_mesh, mesh_to_json, min_angle_deg, save_mesh,
)


def test_annulus_counts():
    mesh = generate_annulus_polygon(GeometrySpec(4, radial_layers=1, angular_resolution=8))
    assert mesh.n_nodes == 16
    assert mesh.n_triangles == 16
    assert len(mesh.sidesets["inner"].nodes) == 8
    assert len(mesh.sidesets["outer"].nodes) == 8


spec_strategy = st.builds(
    GeometrySpec,
    n_sides=st.integers(3, 8),
    poly_radius=st.floats(0.4, 0.6),
    rotation=st.floats(0.0, 2 * math.pi),
    radial_layers=st.integers(1, 4),
    angular_resolution=st.integers(12, 32),
)


@settings(max_examples=25, deadline=None)
@given(spec=spec_strategy)
def test_annulus_valid_and_euler(spec):
    mesh = generate_annulus_polygon(spec)
    assert np.all(mesh.signed_areas() > 0)
    edges, counts = edges_of(mesh.triangles)
    assert counts.max() <= 2
    assert mesh.n_nodes - len(edges) + mesh.n_triangles == 0
    assert len(boundary_loops(mesh)) == 2
    covered = np.sort(np.concatenate([s.nodes for s in mesh.sidesets.values()]))
    np.testing.assert_array_equal(covered, mesh.boundary_nodes())


def test_rotation_by_symmetry_angle_reindexes():
    n = 5
    a = generate_annulus_polygon(GeometrySpec(n, angular_resolution=20))
    b = generate_annulus_polygon(GeometrySpec(n, angular_resolution=20, rotation=2 * math.pi / n))
    ka = np.round(a.nodes, 10) + 0.0
    kb = np.round(b.nodes, 10) + 0.0
    sa = ka[np.lexsort(ka.T)]
    sb = kb[np.lexsort(kb.T)]
    np.testing.assert_allclose(sa, sb, atol=1e-9)


def test_generation_deterministic(tmp_path):
    spec = GeometrySpec(6, rotation=0.3)
    save_mesh(generate_annulus_polygon(spec), tmp_path / "a.json")
    save_mesh(generate_annulus_polygon(spec), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize("n_sides", [3, 4, 6, 8])
@pytest.mark.parametrize("radius", [0.4, 0.5, 0.6])
def test_min_angle_in_dataset_range(n_sides, radius):
    for rot in np.linspace(0, 2 * math.pi / n_sides, 5):
        mesh = generate_annulus_polygon(GeometrySpec(n_sides, poly_radius=radius, rotation=rot))
        assert min_angle_deg(mesh) >= 10.0


def test_boundary_single_triangle():
    mesh = Mesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]))
    edges, _ = boundary_edges(mesh)
    assert len(edges) == 3


def test_boundary_unit_square():
    mesh = generate_rectangle(1, 1)
    edges, labels = boundary_edges(mesh)
    assert len(edges) == 4
    # nodes 0 and 3 are opposite corners joined by the diagonal
    assert (0, 3) not in {tuple(sorted(e)) for e in edges.tolist()}


def test_boundary_orientation_outer_ccw_hole_cw():
    mesh = generate_annulus_polygon(GeometrySpec(4))
    for loop in boundary_loops(mesh):
        p = mesh.nodes[loop]
        signed = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
        r = np.linalg.norm(p, axis=1).mean()
        assert (signed > 0) == (r > 0.9)


def test_non_manifold_edge_rejected():
    nodes = np.array([[0.0, 0], [1, 0], [0, 1], [0, -1], [1, 1]])
    tris = np.array([[0, 1, 2], [0, 3, 1], [1, 4, 2], [0, 1, 4]])
    # edge (0, 1) appears in three triangles
    mesh = Mesh(nodes, tris)
    with pytest.raises(MeshError, match="non-manifold"):
        boundary_edges(mesh)


def test_round_trip_bit_exact(tmp_path):
    mesh = generate_annulus_polygon(GeometrySpec(7, poly_radius=0.47, rotation=0.123))
    save_mesh(mesh, tmp_path / "m.json")
    back = load_mesh(tmp_path / "m.json")
    assert np.array_equal(back.nodes, mesh.nodes)
    assert np.array_equal(back.triangles, mesh.triangles)
    for name, s in mesh.sidesets.items():
        assert back.sidesets[name].label == s.label
        assert np.array_equal(back.sidesets[name].nodes, s.nodes)


def _mesh_dict():
    return json.loads(mesh_to_json(generate_rectangle(2, 2)))


def test_load_rejects_out_of_range_triangle(tmp_path):
    d = _mesh_dict()
    d["triangles"][0][1] = len(d["nodes"])
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(MeshError, match="references node"):
        load_mesh(tmp_path / "bad.json")


def test_load_rejects_overlapping_sidesets(tmp_path):
    d = _mesh_dict()
    d["sidesets"]["wall"]["nodes"].append(d["sidesets"]["inlet"]["nodes"][0])
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(MeshError, match="overlap"):
        load_mesh(tmp_path / "bad.json")


def test_load_reports_json_position(tmp_path):
    (tmp_path / "bad.json").write_text('{"nodes": [[0, 0],\n  [1, }')
    with pytest.raises(MeshError, match="line 2"):
        load_mesh(tmp_path / "bad.json")


def test_load_missing_field(tmp_path):
    (tmp_path / "bad.json").write_text('{"nodes": []}')
    with pytest.raises(MeshError, match="triangles"):
        load_mesh(tmp_path / "bad.json")


@pytest.mark.parametrize("kwargs", [dict(n_sides=2), dict(n_sides=4, poly_radius=1.2),
                                    dict(n_sides=4, radial_layers=0), dict(n_sides=4, angular_resolution=2)])
def test_invalid_spec(kwargs):
    with pytest.raises(MeshError):
        GeometrySpec(**kwargs)


def test_negative_area_rejected():
    mesh = Mesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 2, 1]]))
    with pytest.raises(MeshError, match="signed area"):
        mesh.validate()


def test_transformed_preserves_lengths():
    mesh = generate_annulus_polygon(GeometrySpec(5))
    moved = mesh.transformed(0.7, (2.0, -1.0))
    e = edges_of(mesh.triangles)[0]
    la = np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    lb = np.linalg.norm(moved.nodes[e[:, 0]] - moved.nodes[e[:, 1]], axis=1)
    np.testing.assert_allclose(la, lb, rtol=1e-13)


def test_sideset_arrays_immutable():
    mesh = generate_rectangle(2, 2)
    with pytest.raises(ValueError):
        mesh.nodes[0, 0] = 5.0
    assert isinstance(mesh.sidesets["inlet"], Sideset)
