"""Simplicial spatial meshes, face topology and the space-time layout.

Triangles are stored counter-clockwise.  Local edge ``j`` of a triangle joins
its vertices ``j`` and ``(j + 1) % 3``.  Interior faces carry the unit normal
pointing from the lower-indexed ("left") element to the higher-indexed
("right") one; boundary faces carry the outward normal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for invalid or non-conforming meshes."""


class TopologyError(MeshError):
    pass


@dataclass(frozen=True)
class SpatialMesh:
    vertices: np.ndarray          # (nv, 2)
    triangles: np.ndarray         # (ne, 3), counter-clockwise
    boundary_vertex: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (ne, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle vertex index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.boundary_vertex is None:
            object.__setattr__(self, "boundary_vertex", _boundary_vertices(t, len(v)))

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        """(ne, 3) lengths of local edges."""
        p = self.vertices[self.triangles]
        return np.linalg.norm(np.roll(p, -1, axis=1) - p, axis=2)

    def diameters(self) -> np.ndarray:
        return self.edge_lengths().max(axis=1)

    def inradii(self) -> np.ndarray:
        return 2.0 * np.abs(self.signed_areas()) / self.edge_lengths().sum(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters().max())

    def transformed(self, rotation=0.0, shift=(0.0, 0.0)) -> "SpatialMesh":
        c, s = np.cos(rotation), np.sin(rotation)
        rot = np.array([[c, -s], [s, c]])
        return SpatialMesh(self.vertices @ rot.T + np.asarray(shift), self.triangles)


def _boundary_vertices(triangles, nv):
    edges = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                                    triangles[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    mask = np.zeros(nv, dtype=bool)
    mask[uniq[counts == 1].ravel()] = True
    return mask


@dataclass(frozen=True)
class FaceTopology:
    vertices: np.ndarray      # (nf, 2) global vertex ids of each face (start, end)
    left: np.ndarray          # (nf,) element on the left / owning element
    right: np.ndarray         # (nf,) element on the right, -1 on the boundary
    local_left: np.ndarray    # (nf,) local edge index in the left element
    local_right: np.ndarray   # (nf,) local edge index in the right element, -1 on boundary
    normal: np.ndarray        # (nf, 2) unit normal, out of the left element
    length: np.ndarray        # (nf,) h_F
    element_faces: np.ndarray  # (ne, 3) face id of each local edge

    @property
    def n_faces(self) -> int:
        return len(self.left)

    @property
    def is_boundary(self) -> np.ndarray:
        return self.right < 0

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.right >= 0)

    @property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.right < 0)


@dataclass(frozen=True)
class SpaceTimeLayout:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise MeshError("need at least two time levels")
        if t[0] != 0.0:
            raise MeshError("time partition must start at t_0 = 0")
        if np.any(np.diff(t) <= 0):
            raise MeshError("time levels must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "SpaceTimeLayout":
        if N < 1 or T <= 0:
            raise MeshError("need T > 0 and N >= 1")
        return cls(np.linspace(0.0, T, N + 1))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_slabs(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def tau(self) -> float:
        return float(self.dt.max())

    @property
    def quasi_uniformity(self) -> float:
        """C_U' = tau / min dt_n."""
        return float(self.tau / self.dt.min())

    def slab(self, n: int) -> tuple[float, float]:
        return float(self.times[n]), float(self.times[n + 1])


def build_uniform_mesh(n: int, domain=((0.0, 1.0), (0.0, 1.0))) -> SpatialMesh:
    """Structured mesh of a rectangle: ``n x n`` cells, each cut by its
    south-west to north-east diagonal into two triangles."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"subdivision count must be a positive integer, got {n!r}")
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise ValueError("domain must be a non-degenerate axis-aligned rectangle")
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return SpatialMesh(vertices, triangles)


def refine_uniform(mesh: SpatialMesh) -> SpatialMesh:
    """Red refinement: split every triangle into four through edge midpoints."""
    t = mesh.triangles
    nv = mesh.n_vertices
    edges = np.sort(np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1), axis=2)
    uniq, inv = np.unique(edges.reshape(-1, 2), axis=0, return_inverse=True)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    m = nv + inv.reshape(-1, 3)   # m[:, j] is the midpoint of local edge j
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mab, mbc, mca]),
    ], axis=1).reshape(-1, 3)
    return SpatialMesh(np.vstack([mesh.vertices, mids]), children)


def build_face_topology(mesh: SpatialMesh) -> FaceTopology:
    t = mesh.triangles
    ne = len(t)
    local = np.stack([t, np.roll(t, -1, axis=1)], axis=2)        # (ne, 3, 2)
    key = np.sort(local, axis=2).reshape(-1, 2)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if np.any(counts > 2):
        bad = uniq[counts > 2][0]
        raise TopologyError(f"edge {tuple(bad)} is shared by more than two elements")
    nf = len(uniq)
    # stable sort keeps the lower element first for every face
    order = np.argsort(inv, kind="stable")
    first = np.searchsorted(inv[order], np.arange(nf))
    half_left = order[first]
    left = half_left // 3
    local_left = half_left % 3
    right = np.full(nf, -1, dtype=np.int64)
    local_right = np.full(nf, -1, dtype=np.int64)
    two = counts == 2
    half_right = order[first[two] + 1]
    right[two] = half_right // 3
    local_right[two] = half_right % 3

    # interior edges must be traversed in opposite directions by the two elements
    dl = local.reshape(-1, 2)[half_left[two]]
    dr = local.reshape(-1, 2)[half_right]
    if np.any(dl[:, 0] != dr[:, 1]):
        raise TopologyError("overlapping or inconsistently oriented elements")

    fverts = local.reshape(-1, 2)[half_left]     # oriented as in the left element
    p0 = mesh.vertices[fverts[:, 0]]
    p1 = mesh.vertices[fverts[:, 1]]
    d = p1 - p0
    length = np.linalg.norm(d, axis=1)
    # counter-clockwise element: the outward normal of an edge is its tangent rotated clockwise
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    element_faces = inv.reshape(ne, 3)
    return FaceTopology(fverts, left, right, local_left, local_right, normal, length,
                        element_faces)


def check_conforming(mesh: SpatialMesh, faces: FaceTopology | None = None, tol=1e-12) -> None:
    """Raise :class:`MeshError` unless the mesh is a valid conforming triangulation."""
    area = mesh.signed_areas()
    if np.any(area <= 0):
        raise MeshError(f"{np.count_nonzero(area <= 0)} element(s) with non-positive area")
    if faces is None:
        faces = build_face_topology(mesh)
    # hanging nodes: no vertex may lie in the interior of a boundary edge
    b = faces.boundary
    p0 = mesh.vertices[faces.vertices[b, 0]]
    p1 = mesh.vertices[faces.vertices[b, 1]]
    used = np.unique(mesh.triangles)
    q = mesh.vertices[used]
    for a, c, L in zip(p0, p1, faces.length[b]):
        d = c - a
        s = (q - a) @ d / L**2
        dist = np.abs((q - a) @ np.array([d[1], -d[0]])) / L
        if np.any((s > tol) & (s < 1 - tol) & (dist < tol * L)):
            raise MeshError("hanging node on edge")
    # the boundary edges, each traversed once, must enclose the total element area
    enclosed = 0.5 * np.sum(p0[:, 0] * p1[:, 1] - p1[:, 0] * p0[:, 1])
    if abs(enclosed - area.sum()) > tol * max(1.0, area.sum()):
        raise MeshError("elements do not tile the domain")


def mesh_metrics(mesh: SpatialMesh, faces: FaceTopology) -> dict:
    hK = mesh.diameters()
    rho = mesh.inradii()
    h = float(hK.max())
    ratio_face = []
    for fid in range(faces.n_faces):
        for K in (faces.left[fid], faces.right[fid]):
            if K >= 0:
                ratio_face.append(faces.length[fid] / hK[K])
    ratio_face = np.asarray(ratio_face)
    return {
        "h": h,
        "h_min": float(hK.min()),
        "h_max": h,
        "shape_regularity": float(np.max(hK / rho)),
        "quasi_uniformity": float(np.max(h / hK)),
        "C_e": float(ratio_face.min()),
        "C^e": float(ratio_face.max()),
        "n_elements": mesh.n_elements,
        "n_faces": faces.n_faces,
        "n_interior_faces": int(np.count_nonzero(faces.right >= 0)),
        "n_boundary_faces": int(np.count_nonzero(faces.right < 0)),
    }


def read_mesh(path) -> SpatialMesh:
    """Read the ASCII ``tri-mesh 2`` format (0-based triangle indices)."""
    tokens = Path(path).read_text().split()
    if tokens[:2] != ["tri-mesh", "2"]:
        raise MeshError(f"{path}: expected header 'tri-mesh 2'")
    try:
        pos = 2
        nv = int(tokens[pos]); pos += 1
        verts = np.array(tokens[pos:pos + 2 * nv], dtype=float).reshape(nv, 2); pos += 2 * nv
        nt = int(tokens[pos]); pos += 1
        tris = np.array(tokens[pos:pos + 3 * nt], dtype=np.int64).reshape(nt, 3); pos += 3 * nt
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: malformed mesh file") from exc
    if pos != len(tokens):
        raise MeshError(f"{path}: trailing data after triangle list")
    # accept clockwise input, store counter-clockwise
    mesh = SpatialMesh(verts, tris)
    cw = mesh.signed_areas() < 0
    if np.any(cw):
        tris = tris.copy()
        tris[cw] = tris[cw][:, [0, 2, 1]]
        mesh = SpatialMesh(verts, tris)
    return mesh


def write_mesh(mesh: SpatialMesh, path) -> None:
    lines = ["tri-mesh 2", str(mesh.n_vertices)]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(str(mesh.n_elements))
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
