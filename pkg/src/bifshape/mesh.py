"""Triangle meshes: generators for the two reference domains, deformation
with tangling detection, and JSON round-trip I/O.

Connectivity is frozen at construction; moving-mesh updates only relocate
vertices. All operations are pure functions of their inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed or violates a mesh invariant."""


class TangledMeshError(MeshError):
    """Raised when a displacement would collapse or invert a triangle."""


# Area-ratio floor below which optimizers treat a step as tangling.
# Strictly stronger than plain positivity; keeps element quality bounded.
JACOBIAN_RATIO_FLOOR = 1e-3


def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Signed area of every triangle (positive for counterclockwise)."""
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass
class TriMesh:
    """Conforming triangle mesh with tagged boundary edges.

    vertices        (n, 2) float coordinates
    triangles       (m, 3) vertex indices, all counterclockwise
    boundary_edges  (k, 2) vertex indices, each edge on exactly one triangle
    boundary_tags   list of k tag strings, aligned with boundary_edges
    fixed_vertices  (n,) bool, True where shape optimization must not move
                    the vertex (empty by default: the whole domain deforms)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: list[str]
    fixed_vertices: np.ndarray = field(default=None)  # type: ignore[assignment]
    reorient: bool = False

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        self.boundary_tags = list(self.boundary_tags)
        if self.fixed_vertices is None:
            self.fixed_vertices = np.zeros(len(self.vertices), dtype=bool)
        self.fixed_vertices = np.ascontiguousarray(self.fixed_vertices, dtype=bool)
        self._validate()
        for arr in (self.vertices, self.triangles, self.boundary_edges, self.fixed_vertices):
            arr.flags.writeable = False
        self._cache: dict = {}

    def _validate(self):
        n = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshFormatError("vertices must be an (n, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshFormatError("triangles must be an (m, 3) array")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            bad = int(np.argmax((self.triangles < 0) | (self.triangles >= n)))
            raise MeshFormatError(f"triangle {bad // 3} references a vertex outside 0..{n - 1}")
        if len(self.boundary_edges) != len(self.boundary_tags):
            raise MeshFormatError("boundary_edges and boundary_tags lengths differ")
        if self.boundary_edges.size and (self.boundary_edges.min() < 0 or self.boundary_edges.max() >= n):
            raise MeshFormatError("boundary edge references a vertex out of range")
        if len(self.fixed_vertices) != n:
            raise MeshFormatError("fixed_vertices mask length must equal vertex count")

        areas = signed_areas(self.vertices, self.triangles)
        if self.reorient:
            flip = areas < 0
            if flip.any():
                tri = self.triangles.copy()
                tri[flip] = tri[flip][:, [0, 2, 1]]
                self.triangles = tri
                areas = np.abs(areas)
        bad = np.nonzero(areas <= 0)[0]
        if bad.size:
            raise MeshFormatError(f"triangle {int(bad[0])} has non-positive signed area")

        # Each listed boundary edge must border exactly one triangle, and
        # every single-triangle edge must be listed (complete boundary).
        edge_count: dict[tuple[int, int], int] = {}
        for t in self.triangles:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (int(min(a, b)), int(max(a, b)))
                edge_count[key] = edge_count.get(key, 0) + 1
        listed = set()
        for i, (a, b) in enumerate(self.boundary_edges):
            key = (int(min(a, b)), int(max(a, b)))
            if key in listed:
                raise MeshFormatError(f"boundary edge {i} listed twice")
            listed.add(key)
            if edge_count.get(key, 0) != 1:
                raise MeshFormatError(
                    f"boundary edge {i} = {key} borders {edge_count.get(key, 0)} triangles, expected 1"
                )
        single = {e for e, c in edge_count.items() if c == 1}
        missing = single - listed
        if missing:
            raise MeshFormatError(f"{len(missing)} boundary edges are untagged, e.g. {sorted(missing)[0]}")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = signed_areas(self.vertices, self.triangles)
        return self._cache["areas"]

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def boundary_vertex_mask(self, tag: str | None = None) -> np.ndarray:
        """Boolean mask of vertices on boundary edges (with the given tag)."""
        key = ("bmask", tag)
        if key not in self._cache:
            mask = np.zeros(self.num_vertices, dtype=bool)
            for (a, b), t in zip(self.boundary_edges, self.boundary_tags):
                if tag is None or t == tag:
                    mask[a] = True
                    mask[b] = True
            self._cache[key] = mask
        return self._cache[key]

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same connectivity, tags and fixed mask on relocated vertices."""
        return TriMesh(
            vertices=np.array(vertices, dtype=float),
            triangles=self.triangles,
            boundary_edges=self.boundary_edges,
            boundary_tags=self.boundary_tags,
            fixed_vertices=self.fixed_vertices,
        )


def min_jacobian_ratio(mesh: TriMesh, displacement: np.ndarray) -> float:
    """Minimum ratio of deformed to original signed triangle areas.

    Equals the minimum determinant of the piecewise-affine map (I + d)
    relative to the current mesh: 1.0 for rigid motions, <= 0 when some
    triangle collapses or inverts.
    """
    d = np.asarray(displacement, dtype=float)
    if d.shape != mesh.vertices.shape:
        raise MeshError(f"displacement shape {d.shape} does not match vertices {mesh.vertices.shape}")
    new_areas = signed_areas(mesh.vertices + d, mesh.triangles)
    return float(np.min(new_areas / mesh.triangle_areas()))


def apply_displacement(mesh: TriMesh, displacement: np.ndarray) -> TriMesh:
    """Move every vertex by `displacement`, keeping connectivity.

    Realizes one composition step of the moving-mesh geometry update.
    Raises TangledMeshError when the displaced mesh would contain a
    non-positive triangle; the caller is expected to shrink the step.
    """
    ratio = min_jacobian_ratio(mesh, displacement)
    if ratio <= 0.0:
        raise TangledMeshError(f"displacement tangles the mesh (min area ratio {ratio:.3e})")
    return mesh.with_vertices(mesh.vertices + np.asarray(displacement, dtype=float))


def _delaunay_mesh(points: np.ndarray, tag: str) -> TriMesh:
    """Triangulate a convex point cloud; hull edges become the boundary."""
    tri = Delaunay(points)
    hull = tri.convex_hull
    return TriMesh(
        vertices=points,
        triangles=tri.simplices,
        boundary_edges=hull,
        boundary_tags=[tag] * len(hull),
        reorient=True,
    )


def gen_unit_disk(h: float) -> TriMesh:
    """Mesh of the unit disk from concentric staggered rings.

    Boundary vertices sit exactly on the unit circle; the polygonal area
    deficit is O(h^2). All boundary edges are tagged "outer".
    """
    if not (0.0 < h < 1.0):
        raise MeshError(f"target edge length h = {h} must lie in (0, 1)")
    n_rings = max(1, round(1.0 / h))
    pts = [(0.0, 0.0)]
    for k in range(1, n_rings + 1):
        r = k / n_rings
        m = max(6, math.ceil(2.0 * math.pi * r / h))
        offset = (k % 2) * math.pi / m  # stagger alternate rings
        theta = 2.0 * math.pi * np.arange(m) / m + offset
        pts.extend(zip(r * np.cos(theta), r * np.sin(theta)))
    return _delaunay_mesh(np.array(pts, dtype=float), "outer")


def _rounded_square_sdf(p: np.ndarray, half: float, r: float) -> np.ndarray:
    """Signed distance to the rounded square boundary (negative inside)."""
    q = np.abs(p) - (half - r)
    qp = np.maximum(q, 0.0)
    outside = np.hypot(qp[:, 0], qp[:, 1])
    inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
    return outside + inside - r


def gen_rounded_square(edge: float, r: float, h: float) -> TriMesh:
    """Mesh of a square of side `edge`, centered at the origin, with
    quarter-circle corner fillets of radius `r`.

    Requires 0 < 2r < edge and 0 < h < r. Boundary edges are tagged "outer".
    """
    if not (edge > 0.0 and 0.0 < 2.0 * r < edge):
        raise MeshError(f"need 0 < 2r < edge, got edge = {edge}, r = {r}")
    if not (0.0 < h < r):
        raise MeshError(f"need 0 < h < r, got h = {h}, r = {r}")
    half = edge / 2.0
    s = half - r  # fillet center offset

    # Counterclockwise boundary polyline: four straights + four arcs.
    boundary: list[tuple[float, float]] = []

    def straight(p_from, p_to):
        p_from = np.asarray(p_from, dtype=float)
        p_to = np.asarray(p_to, dtype=float)
        n_seg = max(1, math.ceil(float(np.hypot(*(p_to - p_from))) / h))
        for i in range(n_seg):  # endpoint supplied by the next piece
            boundary.append(tuple(p_from + (p_to - p_from) * (i / n_seg)))

    def arc(center, a_from, a_to):
        n_seg = max(2, math.ceil(abs(a_to - a_from) * r / h))
        for i in range(n_seg):
            a = a_from + (a_to - a_from) * (i / n_seg)
            boundary.append((center[0] + r * math.cos(a), center[1] + r * math.sin(a)))

    straight((-s, -half), (s, -half))
    arc((s, -s), -math.pi / 2.0, 0.0)
    straight((half, -s), (half, s))
    arc((s, s), 0.0, math.pi / 2.0)
    straight((s, half), (-s, half))
    arc((-s, s), math.pi / 2.0, math.pi)
    straight((-half, s), (-half, -s))
    arc((-s, -s), math.pi, 1.5 * math.pi)

    # Interior: hexagonal lattice clipped a safe margin inside the boundary.
    dy = h * math.sqrt(3.0) / 2.0
    ys = np.arange(-half + 0.5 * h, half, dy)
    interior = []
    for j, y in enumerate(ys):
        x0 = -half + 0.5 * h + (j % 2) * 0.5 * h
        xs = np.arange(x0, half, h)
        interior.extend((x, y) for x in xs)
    interior = np.array(interior, dtype=float)
    keep = _rounded_square_sdf(interior, half, r) <= -0.55 * h
    points = np.vstack([np.array(boundary, dtype=float), interior[keep]])
    return _delaunay_mesh(points, "outer")


def _mesh_payload(mesh: TriMesh) -> dict:
    return {
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": [
            [int(a), int(b), t] for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags)
        ],
        "fixed_vertices": np.nonzero(mesh.fixed_vertices)[0].tolist(),
    }


def mesh_checksum(mesh: TriMesh) -> str:
    """SHA-256 of the canonical JSON form; keys serialized fields to a mesh."""
    blob = json.dumps(_mesh_payload(mesh), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_mesh(mesh: TriMesh, path) -> None:
    """Write a mesh as JSON (0-based indices; fixed vertices as an index list)."""
    with open(path, "w") as fh:
        json.dump(_mesh_payload(mesh), fh, sort_keys=True)
        fh.write("\n")


def read_mesh(path) -> TriMesh:
    """Read a JSON mesh, re-checking every construction invariant.

    Orientation or connectivity violations reject the file; parse errors
    carry line/column diagnostics from the JSON decoder.
    """
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise MeshFormatError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    for key in ("vertices", "triangles", "boundary_edges", "fixed_vertices"):
        if key not in payload:
            raise MeshFormatError(f"{path}: missing field '{key}'")
    try:
        edges = [(int(e[0]), int(e[1])) for e in payload["boundary_edges"]]
        tags = [str(e[2]) for e in payload["boundary_edges"]]
        verts = np.array(payload["vertices"], dtype=float)
        fixed = np.zeros(len(verts), dtype=bool)
        idx = np.array(payload["fixed_vertices"], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(verts)):
            raise MeshFormatError(f"{path}: fixed vertex index out of range")
        fixed[idx] = True
        return TriMesh(
            vertices=verts,
            triangles=np.array(payload["triangles"], dtype=np.int64).reshape(-1, 3),
            boundary_edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
            boundary_tags=tags,
            fixed_vertices=fixed,
        )
    except MeshFormatError:
        raise
    except (ValueError, TypeError, IndexError) as err:
        raise MeshFormatError(f"{path}: malformed mesh data: {err}") from err
