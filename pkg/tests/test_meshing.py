import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treevae.meshing import (
    ScalarGrid,
    TriMesh,
    densify_centerline,
    evaluate_field,
    export_mesh,
    marching_cubes,
    read_grid,
    read_obj,
    sdf_grid,
    tree_to_mesh,
    write_grid,
)
from treevae.tree import TreeError, VesselTree, path_tree


def segment_tree(length=1.0, radius=0.25, axis=0):
    a = np.zeros((2, 4))
    a[1, axis] = length
    a[:, 3] = radius
    return VesselTree.from_parents(a, [-1, 0])


def dist_to_segment(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def analytic_grid(fn, lo, hi, voxel):
    n = int(np.ceil((hi - lo) / voxel)) + 1
    g = ScalarGrid(np.full(3, lo), voxel, np.zeros((n, n, n)))
    return ScalarGrid(g.origin, voxel, fn(g.points()))


# -- densification ----------------------------------------------------------


def test_densify_examples():
    pts, rad = densify_centerline(segment_tree(), 0.25)
    assert len(pts) >= 5
    assert np.allclose(pts[:2], [[0, 0, 0], [1, 0, 0]])
    a = np.array([[0, 0, 0, 1.0], [1, 0, 0, 0.0]])
    t = VesselTree(a, [-1, -1], [1, -1], 0)
    pts, rad = densify_centerline(t, 0.5)
    assert rad[np.argmin(np.abs(pts[:, 0] - 0.5))] == pytest.approx(0.5)
    pts, _ = densify_centerline(segment_tree(), 2.0)
    assert len(pts) == 2
    with pytest.raises(TreeError):
        densify_centerline(VesselTree(np.ones((1, 4)), [-1], [-1]), 0.1)


@given(st.floats(0.01, 1.0))
def test_densify_spacing(step):
    t = path_tree(np.array([[0, 0, 0], [1, 0.5, 0], [1, 2, 1.0]]))
    pts, _ = densify_centerline(t, step)
    for p, c in t.edges():
        seg = pts[dist_to_segment(pts, t.positions[p], t.positions[c]) < 1e-9]
        ab = t.positions[c] - t.positions[p]
        s = np.sort((seg - t.positions[p]) @ ab / np.linalg.norm(ab))
        assert np.diff(s).max() <= step + 1e-9


# -- field ------------------------------------------------------------------


def test_field_spot_values():
    pts, rad = densify_centerline(segment_tree(), 0.05)
    step = 0.05
    f = evaluate_field([[0.5, 0, 0], [0.5, 0.25, 0], [0.5, 0.5, 0]], pts, rad)
    assert f[0] == pytest.approx(-0.0625, abs=(step / 2) ** 2)
    assert f[1] == pytest.approx(0.0, abs=(step / 2) ** 2)
    assert f[2] == pytest.approx(0.1875, abs=(step / 2) ** 2)
    assert evaluate_field([[0, 0, 0]], pts, rad)[0] == pytest.approx(-0.0625)


def test_field_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 3))
    rad = rng.uniform(0.01, 0.8, 300)
    q = rng.normal(size=(500, 3)) * 2
    brute = np.min(((q[:, None] - pts[None]) ** 2).sum(-1) - rad[None] ** 2, axis=1)
    assert np.allclose(evaluate_field(q, pts, rad), brute, atol=1e-12)


def test_samples_are_inside():
    t = path_tree(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0.0]]))
    pts, rad = densify_centerline(t, 0.1)
    f = evaluate_field(pts, pts, rad)
    assert np.all(f <= -rad**2 + 1e-12)


def test_grid_covers_padded_box():
    pts = np.array([[0, 0, 0], [1, 0, 0.0]])
    g = sdf_grid(pts, np.array([0.2, 0.2]), 0.1, padding=0.1)
    assert np.all(g.origin <= np.array([-0.3, -0.3, -0.3]) + 1e-12)
    far = g.origin + 0.1 * (np.array(g.dims) - 1)
    assert np.all(far >= np.array([1.3, 0.3, 0.3]) - 1e-12)


def test_scalar_grid_validation():
    with pytest.raises(ValueError):
        ScalarGrid(np.zeros(3), 0.1, np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        ScalarGrid(np.zeros(3), 0.1, np.full((2, 2, 2), np.nan))


# -- marching cubes ---------------------------------------------------------


def test_all_positive_grid_is_empty():
    m = marching_cubes(ScalarGrid(np.zeros(3), 1.0, np.ones((4, 4, 4))))
    assert m.n_faces == 0 and m.n_vertices == 0


@pytest.mark.parametrize("voxel", [0.1, 0.05])
def test_sphere_oracle(voxel):
    R, c = 0.7, np.array([0.03, -0.01, 0.02])
    g = analytic_grid(lambda p: ((p - c) ** 2).sum(-1) - R**2, -1.0, 1.0, voxel)
    m = marching_cubes(g)
    r = np.linalg.norm(m.vertices - c, axis=1)
    assert np.abs(r - R).max() <= 1.5 * voxel
    assert m.is_watertight()
    # outward normals: each face normal points away from the center
    centroids = m.vertices[m.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.face_normals(), centroids - c) > 0)


def capsule_deviation(mesh, a, b, R):
    return np.abs(dist_to_segment(mesh.vertices, a, b) - R).max()


def test_capsule_oracle_and_refinement():
    t = segment_tree(1.0, 0.25)
    a, b = t.positions
    devs = []
    for res in (16, 32):
        m, g = tree_to_mesh(t, resolution=res)
        assert m.is_watertight()
        devs.append(capsule_deviation(m, a, b, 0.25))
        assert devs[-1] <= 1.5 * g.voxel_size
    assert devs[1] < devs[0]


def test_mesh_has_no_degenerate_faces():
    t = path_tree(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0.3]]))
    m, _ = tree_to_mesh(t, resolution=24)
    assert np.all(np.linalg.norm(m.face_normals(), axis=1) > 0)
    assert m.is_watertight()


def test_trimesh_index_validation():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((2, 3)), [[0, 1, 2]])


# -- files ------------------------------------------------------------------


def test_obj_single_triangle(tmp_path):
    m = TriMesh(np.eye(3), [[0, 1, 2]])
    text = export_mesh(m, tmp_path / "t.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in text) == 3
    assert [line for line in text if line.startswith("f ")] == ["f 1 2 3"]


def test_obj_empty(tmp_path):
    p = export_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.obj")
    assert p.read_text().startswith("#")
    assert read_obj(p).n_faces == 0


def test_obj_round_trip(tmp_path):
    m, _ = tree_to_mesh(segment_tree(), resolution=12)
    back = read_obj(export_mesh(m, tmp_path / "m.obj"))
    assert np.array_equal(back.faces, m.faces)
    assert np.allclose(back.vertices, m.vertices, atol=5e-7)


def test_grid_dump_round_trip(tmp_path):
    g = ScalarGrid(np.array([1.0, 2, 3]), 0.5, np.random.default_rng(0).normal(size=(2, 3, 4)))
    back = read_grid(write_grid(g, tmp_path / "g.bin"))
    assert np.array_equal(back.values, g.values) and np.array_equal(back.origin, g.origin)


def test_lookup_table_uses_exactly_the_crossing_edges():
    from treevae._mc_tables import EDGE_CORNERS, TRIANGLES

    assert len(TRIANGLES) == 256
    for case, tris in enumerate(TRIANGLES):
        assert len(tris) % 3 == 0
        inside = [(case >> k) & 1 for k in range(8)]
        crossing = {e for e, (a, b) in enumerate(EDGE_CORNERS) if inside[a] != inside[b]}
        assert set(tris) == crossing, case


@given(st.integers(0, 10_000))
def test_random_fields_give_closed_surfaces(seed):
    # positive border keeps every surface interior to the grid
    rng = np.random.default_rng(seed)
    v = np.ones((7, 7, 7))
    v[1:-1, 1:-1, 1:-1] = rng.uniform(-1, 1, (5, 5, 5))
    m = marching_cubes(ScalarGrid(np.zeros(3), 1.0, v))
    if m.n_faces:
        assert all(c == 2 for c in m.edge_use_counts().values())
