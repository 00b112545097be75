import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icegraph.mesh import (
    MeshError, Rectangle, TriMesh, edge_count_from_boundary, generate_initial_mesh,
    interpolate_node_field, mesh_to_graph, read_mesh, refine_by_velocity, side_masks,
    signed_areas, transfer_field, velocity_target_lengths, write_mesh,
)

KM = 1e3
SQUARE = Rectangle(0, 100 * KM, 0, 100 * KM)


def _assert_valid(mesh: TriMesh):
    tri = mesh.triangles
    assert tri.min() >= 0 and tri.max() < mesh.num_nodes
    assert np.all((tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2]))
    assert np.all(signed_areas(mesh.node_xy, tri) > 0)
    assert np.isclose(mesh.areas.sum(), mesh.bounding_box.area, rtol=1e-9)


def test_initial_mesh_coarse_node_count():
    mesh = generate_initial_mesh(SQUARE, 20 * KM)
    assert 25 <= mesh.num_nodes <= 40
    _assert_valid(mesh)
    assert abs(mesh.mean_edge_length() / (20 * KM) - 1) < 0.15


def test_initial_mesh_node_count_scales_with_area_per_triangle():
    coarse = generate_initial_mesh(SQUARE, 20 * KM)
    fine = generate_initial_mesh(SQUARE, 5 * KM)
    # expected node count ~ area / (triangle area) / 2 for a triangulation with edge m0
    ratio = fine.num_nodes / coarse.num_nodes
    assert 16 * 0.7 <= ratio <= 16 * 1.3
    assert abs(fine.mean_edge_length() / (5 * KM) - 1) < 0.15


def test_initial_mesh_rejects_small_or_degenerate_domain():
    with pytest.raises(MeshError, match="too small"):
        generate_initial_mesh(Rectangle(0, 10 * KM, 0, 10 * KM), 20 * KM)
    with pytest.raises(MeshError, match="degenerate"):
        generate_initial_mesh(Rectangle(0, 100 * KM, 5, 5), 5 * KM)
    with pytest.raises(MeshError):
        generate_initial_mesh(SQUARE, 0.0)


def test_initial_mesh_is_seed_deterministic():
    a = generate_initial_mesh(SQUARE, 10 * KM, seed=3)
    b = generate_initial_mesh(SQUARE, 10 * KM, seed=3)
    assert np.array_equal(a.node_xy, b.node_xy) and np.array_equal(a.triangles, b.triangles)


def test_boundary_flags_cover_rectangle_sides():
    mesh = generate_initial_mesh(SQUARE, 10 * KM)
    sides = side_masks(mesh)
    on_side = sides["west"] | sides["east"] | sides["south"] | sides["north"]
    assert np.array_equal(on_side, mesh.boundary)
    be = mesh.boundary_edges
    assert np.all(mesh.boundary[be.ravel()])


def test_trimesh_rejects_bad_input():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError):
        TriMesh(xy, np.array([[0, 2, 1]]), np.ones(3, bool))  # clockwise
    with pytest.raises(MeshError):
        TriMesh(xy, np.array([[0, 1, 3]]), np.ones(3, bool))
    with pytest.raises(MeshError):
        TriMesh(xy, np.array([[0, 1, 1]]), np.ones(3, bool))
    dup = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0 + 1e-12]])
    with pytest.raises(MeshError):
        TriMesh(dup, np.array([[0, 1, 2], [1, 3, 0]]), np.ones(4, bool))


def test_refine_uniform_speed_keeps_resolution():
    mesh = generate_initial_mesh(SQUARE, 10 * KM)
    out = refine_by_velocity(mesh, np.full(mesh.num_nodes, 100.0), 5 * KM, 10 * KM)
    _assert_valid(out)
    assert abs(out.mean_edge_length() / mesh.mean_edge_length() - 1) < 0.10


def test_refine_fast_half_gets_shorter_edges():
    mesh = generate_initial_mesh(SQUARE, 10 * KM)
    x = mesh.node_xy[:, 0]
    speed = np.where(x < 50 * KM, 1000.0, 100.0)
    out = refine_by_velocity(mesh, speed, 4 * KM, 20 * KM)
    _assert_valid(out)
    left = out.mean_edge_length(lambda mid: mid[:, 0] < 50 * KM)
    right = out.mean_edge_length(lambda mid: mid[:, 0] >= 50 * KM)
    assert left < right


@pytest.mark.parametrize("length", [6 * KM, 12 * KM])
def test_refine_clamped_lengths_are_uniform(length):
    mesh = generate_initial_mesh(SQUARE, 10 * KM)
    rng = np.random.default_rng(0)
    out = refine_by_velocity(mesh, rng.uniform(0, 3000, mesh.num_nodes), length, length)
    _assert_valid(out)
    for half in (lambda m: m[:, 0] < 50 * KM, lambda m: m[:, 0] >= 50 * KM):
        assert abs(out.mean_edge_length(half) / length - 1) < 0.15


def test_refine_rejects_nonfinite_speed():
    mesh = generate_initial_mesh(SQUARE, 20 * KM)
    speed = np.zeros(mesh.num_nodes)
    speed[0] = np.nan
    with pytest.raises(MeshError):
        refine_by_velocity(mesh, speed, 5 * KM, 10 * KM)
    with pytest.raises(MeshError):
        refine_by_velocity(mesh, -np.ones(mesh.num_nodes), 5 * KM, 10 * KM)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=2, max_size=40))
def test_target_length_monotone_in_speed(speeds):
    v = np.asarray(speeds)
    t = velocity_target_lengths(v, 2 * KM, 20 * KM)
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(t[order]) <= 1e-9)
    assert t.min() >= 2 * KM - 1e-9 and t.max() <= 20 * KM + 1e-9


def test_graph_single_triangle():
    mesh = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), np.ones(3, bool))
    g = mesh_to_graph(mesh)
    assert g.num_edges == 9
    assert int(g.self_mask.sum()) == 3
    assert np.array_equal(g.degree, [3, 3, 3])


def test_graph_two_triangles():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    mesh = TriMesh(xy, np.array([[0, 1, 2], [0, 2, 3]]), np.ones(4, bool))
    g = mesh_to_graph(mesh)
    assert np.array_equal(g.degree, [4, 3, 4, 3])
    assert np.isclose(g.edge_distance[(g.dst == 0) & (g.src == 2)][0], np.sqrt(2))


def test_graph_invariants_on_generated_mesh():
    mesh = generate_initial_mesh(SQUARE, 10 * KM, seed=1)
    g = mesh_to_graph(mesh)
    pairs = {tuple(e) for e in g.edges.tolist()}
    assert all((j, i) in pairs for i, j in pairs)
    assert all((i, i) in pairs for i in range(g.num_nodes))
    off = ~g.self_mask
    d = mesh.node_xy[g.dst[off]] - mesh.node_xy[g.src[off]]
    assert np.allclose(g.edge_distance[off], np.hypot(d[:, 0], d[:, 1]))
    assert np.all(g.edge_distance[off] > 0)
    # degree = distinct mesh neighbours + self
    for i in range(g.num_nodes):
        nb = set(g.neighbors(i).tolist())
        tri_nb = set(mesh.triangles[(mesh.triangles == i).any(axis=1)].ravel().tolist())
        assert nb == tri_nb
    again = mesh_to_graph(mesh)
    assert np.array_equal(g.edges, again.edges)


@pytest.mark.parametrize("elements,nodes", [(931, 526), (2085, 1112), (4739, 2468)])
def test_reported_mesh_sizes_are_euler_consistent(elements, nodes):
    # triangulated disk: V - E + T = 1 gives E; then B = 2E - 3T must be a positive integer
    edges = nodes + elements - 1
    boundary = 2 * edges - 3 * elements
    assert boundary > 0
    assert edge_count_from_boundary(elements, boundary) == edges


def test_edge_count_formula_on_mesh_of_reported_scale():
    # about 526 nodes, the coarse mesh size reported for the real glacier
    mesh = generate_initial_mesh(Rectangle(0, 200 * KM, 0, 200 * KM), 10 * KM)
    assert 400 < mesh.num_nodes < 700
    e = len(mesh.edges)
    assert e == edge_count_from_boundary(mesh.num_triangles, len(mesh.boundary_edges))
    assert e == mesh.num_nodes + mesh.num_triangles - 1


def test_interpolation_exact_at_nodes_and_centroid():
    mesh = generate_initial_mesh(SQUARE, 20 * KM)
    rng = np.random.default_rng(2)
    vals = rng.normal(size=mesh.num_nodes)
    assert np.array_equal(interpolate_node_field(mesh, vals, mesh.node_xy), vals)
    t = mesh.triangles[0]
    vals = np.zeros(mesh.num_nodes)
    vals[t] = [0.0, 3.0, 6.0]
    centroid = mesh.node_xy[t].mean(axis=0)
    assert np.isclose(interpolate_node_field(mesh, vals, centroid[None])[0], 3.0)


def test_interpolation_outside_is_missing_and_transfer_falls_back():
    mesh = generate_initial_mesh(SQUARE, 20 * KM)
    vals = np.arange(mesh.num_nodes, dtype=float)
    out = interpolate_node_field(mesh, vals, np.array([[-5 * KM, 50 * KM]]))
    assert np.isnan(out[0])
    filled = transfer_field(mesh, vals, np.array([[-1.0, 0.0]]))
    assert filled[0] == vals[np.argmin(np.hypot(*mesh.node_xy.T))]


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-100, 100), st.integers(0, 1000))
def test_interpolation_reproduces_affine_fields(a, b, c, seed):
    mesh = generate_initial_mesh(SQUARE, 20 * KM, seed=seed % 7)
    f = lambda p: a * p[:, 0] / KM + b * p[:, 1] / KM + c
    pts = np.random.default_rng(seed).uniform(1 * KM, 99 * KM, size=(20, 2))
    got = interpolate_node_field(mesh, f(mesh.node_xy), pts)
    scale = max(1.0, np.abs(f(pts)).max())
    assert np.max(np.abs(got - f(pts))) <= 1e-10 * scale


def test_mesh_file_round_trip(tmp_path):
    mesh = generate_initial_mesh(SQUARE, 20 * KM, seed=5)
    path = tmp_path / "mesh.txt"
    write_mesh(mesh, path)
    back = read_mesh(path)
    assert np.array_equal(back.node_xy, mesh.node_xy)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.boundary, mesh.boundary)
    assert path.read_text().splitlines()[0] == f"nodes {mesh.num_nodes} triangles {mesh.num_triangles}"


def test_graph_permutation_relabels_consistently():
    mesh = generate_initial_mesh(SQUARE, 20 * KM)
    g = mesh_to_graph(mesh)
    perm = np.random.default_rng(0).permutation(g.num_nodes)
    h = g.permuted(perm)
    assert np.array_equal(np.sort(h.degree), np.sort(g.degree))
    assert np.array_equal(h.degree, g.degree[perm])
