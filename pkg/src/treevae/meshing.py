"""Centerline to surface: implicit tube field plus marching cubes.

The field stored on the grid is ``min_c (|v - c|^2 - r_c^2)`` over centerline
samples ``c``. It is negative inside the vessel and zero on the surface, but
it is in squared-length units, so its values are not distances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import CORNERS, EDGE_CORNERS, TRIANGLES
from .io import atomic_write_text
from .tree import TreeError, VesselTree


@dataclass(frozen=True)
class ScalarGrid:
    origin: np.ndarray
    voxel_size: float
    values: np.ndarray  # (nx, ny, nz); sample (i, j, k) sits at origin + (i, j, k) * voxel_size

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError(f"grid needs at least 2 samples per axis, got shape {self.values.shape}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def points(self) -> np.ndarray:
        """World coordinates of every sample, shape ``dims + (3,)``."""
        axes = [self.origin[a] + self.voxel_size * np.arange(n) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        """Every undirected edge is used by exactly two triangles."""
        return self.n_faces > 0 and all(c == 2 for c in self.edge_use_counts().values())


def densify_centerline(tree: VesselTree, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample every parent-child segment at spacing <= ``step``.

    Position and radius are interpolated linearly. Returns ``(points, radii)``
    with the original nodes first, in node order.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if tree.n_nodes < 2:
        raise TreeError("cannot densify a single-node tree")
    pts, rad = [tree.positions], [tree.radii]
    for p, c in tree.edges():
        a, b = tree.attrs[p], tree.attrs[c]
        length = float(np.linalg.norm(b[:3] - a[:3]))
        k = max(1, int(np.ceil(length / step - 1e-12)))
        if k == 1:
            continue
        t = (np.arange(1, k) / k)[:, None]
        inner = a + t * (b - a)
        pts.append(inner[:, :3])
        rad.append(inner[:, 3])
    return np.concatenate(pts), np.concatenate(rad)


def evaluate_field(query, points, radii) -> np.ndarray:
    """``min_c (|q - c|^2 - r_c^2)`` for each query point, computed exactly.

    A k-d tree narrows the candidates: a sample farther than
    ``sqrt(d_nn^2 + r_max^2 - r_min^2)`` cannot win. Rows whose candidate
    list may be incomplete fall back to a brute-force scan.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    if not len(points):
        raise ValueError("no centerline samples")
    r2 = radii**2
    slack = float(r2.max() - r2.min())
    k = min(len(points), 32)
    kd = cKDTree(points)
    d, idx = kd.query(q, k=k)
    d, idx = d.reshape(len(q), k), idx.reshape(len(q), k)
    out = np.min(d**2 - r2[idx], axis=1)
    if k < len(points):
        unsure = np.flatnonzero(d[:, -1] ** 2 <= d[:, 0] ** 2 + slack)
        for s in range(0, len(unsure), 256):
            rows = unsure[s : s + 256]
            diff = q[rows, None, :] - points[None, :, :]
            out[rows] = np.min(np.einsum("ijk,ijk->ij", diff, diff) - r2[None, :], axis=1)
    return out


def sdf_grid(points, radii, voxel_size: float, padding: float = 0.0) -> ScalarGrid:
    """Sample the tube field on a grid covering the samples' bounding box
    grown by ``max(radii) + padding`` on every side."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    if not len(points):
        raise ValueError("no centerline samples")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    margin = float(radii.max()) + padding
    lo = points.min(axis=0) - margin
    hi = points.max(axis=0) + margin
    dims = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1, 2)
    grid = ScalarGrid(lo, voxel_size, np.zeros(tuple(dims)))
    values = evaluate_field(grid.points().reshape(-1, 3), points, radii).reshape(tuple(dims))
    return ScalarGrid(lo, voxel_size, values)


_CORNERS = np.array(CORNERS)
# each cell edge as (offset of its lower corner, axis)
_EDGE_BASE = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGE_CORNERS])
_EDGE_AXIS = np.array([int(np.flatnonzero(_CORNERS[a] != _CORNERS[b])[0]) for a, b in EDGE_CORNERS])


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriMesh:
    """Triangulate the ``iso`` level set of ``grid``.

    Vertices are shared through global grid-edge ids, so a closed level set
    yields a closed mesh. Faces are wound so that normals point toward
    increasing field values (outward for the tube field).
    """
    vals = grid.values
    nx, ny, nz = vals.shape
    below = vals < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int64) << bit
    active = np.flatnonzero((case != 0) & (case != 255))
    if not len(active):
        return TriMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    cells = np.stack(np.unravel_index(active, case.shape), axis=1)
    cases = case.reshape(-1)[active]

    tri_cells, tri_edges = [], []
    for c in np.unique(cases):
        table = TRIANGLES[c]
        if not table:
            continue
        sel = cells[cases == c]
        edges = np.array(table).reshape(-1, 3)
        tri_cells.append(np.repeat(sel, len(edges), axis=0))
        tri_edges.append(np.tile(edges, (len(sel), 1)))
    tcell = np.concatenate(tri_cells)  # (T, 3) cell index per triangle
    tedge = np.concatenate(tri_edges)  # (T, 3) local edge per corner

    base = tcell[:, None, :] + _EDGE_BASE[tedge]  # lower grid point of each edge
    axis = _EDGE_AXIS[tedge]
    gid = (np.ravel_multi_index((base[..., 0], base[..., 1], base[..., 2]), vals.shape)) * 3 + axis
    uniq, inverse = np.unique(gid.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    p0 = np.stack(np.unravel_index(uniq // 3, vals.shape), axis=1)
    ax = uniq % 3
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = vals[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = vals[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    verts = grid.origin + grid.voxel_size * (p0 + t[:, None] * (p1 - p0))

    # the table winds faces with normals toward the below-iso side; flip them
    faces = faces[:, ::-1]
    return _drop_degenerate(TriMesh(verts, faces))


def _drop_degenerate(mesh: TriMesh) -> TriMesh:
    """Weld coincident vertices and remove zero-area triangles.

    Coincident vertices only arise when a grid sample equals the iso value
    exactly.
    """
    if not mesh.n_faces:
        return mesh
    uniq, inverse = np.unique(mesh.vertices, axis=0, return_inverse=True)
    if len(uniq) < mesh.n_vertices:
        # keep first-occurrence order so the output stays deterministic
        first = np.full(len(uniq), mesh.n_vertices)
        np.minimum.at(first, inverse.reshape(-1), np.arange(mesh.n_vertices))
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        mesh = TriMesh(uniq[order], rank[inverse.reshape(-1)][mesh.faces])
    f = mesh.faces
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    keep &= np.linalg.norm(TriMesh(mesh.vertices, f).face_normals(), axis=1) > 0
    return TriMesh(mesh.vertices, f[keep])


def tree_to_mesh(tree: VesselTree, resolution: int = 128, step: float | None = None, padding_voxels: float = 2.0):
    """Mesh a tree with voxel size = longest bounding-box edge / ``resolution``.

    Returns ``(mesh, grid)``.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    extent = np.ptp(tree.positions, axis=0).max() + 2 * tree.radii.max()
    voxel = float(extent) / resolution
    pts, rad = densify_centerline(tree, step if step is not None else voxel / 2)
    grid = sdf_grid(pts, rad, voxel, padding=padding_voxels * voxel)
    return marching_cubes(grid), grid


def obj_text(mesh: TriMesh) -> str:
    lines = ["# treevae surface mesh", f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    lines += [f"v {x:.10g} {y:.10g} {z:.10g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def export_mesh(mesh: TriMesh, path) -> Path:
    """Write ``mesh`` as Wavefront OBJ with 1-based face indices."""
    path = Path(path)
    atomic_write_text(path, obj_text(mesh))
    return path


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_grid(grid: ScalarGrid, path) -> Path:
    """Debug dump: one JSON header line, then little-endian float64 values in C order."""
    path = Path(path)
    header = {"dims": list(grid.dims), "origin": grid.origin.tolist(), "voxel_size": grid.voxel_size, "dtype": "<f8"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(grid.values.astype("<f8").tobytes(order="C"))
    return path


def read_grid(path) -> ScalarGrid:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        values = np.frombuffer(fh.read(), dtype=header["dtype"]).reshape(header["dims"])
    return ScalarGrid(np.array(header["origin"]), header["voxel_size"], values.copy())
