"""Triangle mesh ingestion, normalization, graph geodesics, and farthest-point sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

# Faces with area below this fraction of the squared bbox diagonal are dropped at load.
DEGENERATE_AREA_REL = 1e-12


class MeshError(ValueError):
    """Unreadable, empty, or structurally invalid mesh data."""


class TriangleMesh:
    """Immutable triangle mesh: vertices (N, 3) float64 and faces (M, 3) int64.

    Face indices must be in range and distinct within each face. Per-face unit
    normals and the undirected edge graph are derived lazily and cached.
    """

    def __init__(self, vertices, faces, dropped_faces: int = 0):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        self.dropped_faces = int(dropped_faces)
        self._face_normals = None
        self._edge_graph = None
        self._vertex_faces = None
        self._validate()

    def _validate(self) -> None:
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")
        if len(self.vertices) < 4:
            raise MeshError(f"mesh needs at least 4 vertices, got {len(self.vertices)}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces must be (M, 3), got {self.faces.shape}")
        if len(self.faces) < 1:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        f = self.faces
        if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise MeshError("face repeats a vertex index")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def face_normals(self) -> np.ndarray:
        """Unit normals per face, (M, 3). Zero for numerically degenerate faces."""
        if self._face_normals is None:
            v = self.vertices
            f = self.faces
            n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            self._face_normals = np.where(norm > 0, n / np.where(norm == 0, 1.0, norm), 0.0)
        return self._face_normals

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_center(self) -> np.ndarray:
        lo, hi = self.bbox()
        return (lo + hi) / 2.0

    def bbox_extent(self) -> np.ndarray:
        lo, hi = self.bbox()
        return hi - lo

    def edge_graph(self) -> csr_matrix:
        """Sparse symmetric vertex-edge graph weighted by Euclidean edge length."""
        if self._edge_graph is None:
            f = self.faces
            edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            edges.sort(axis=1)
            edges = np.unique(edges, axis=0)
            w = np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1)
            n = self.n_vertices
            i = np.concatenate([edges[:, 0], edges[:, 1]])
            j = np.concatenate([edges[:, 1], edges[:, 0]])
            self._edge_graph = csr_matrix((np.concatenate([w, w]), (i, j)), shape=(n, n))
        return self._edge_graph

    def vertex_faces(self) -> list[np.ndarray]:
        """Face indices incident to each vertex."""
        if self._vertex_faces is None:
            order = np.argsort(self.faces.reshape(-1), kind="stable")
            face_of = order // 3
            verts = self.faces.reshape(-1)[order]
            splits = np.searchsorted(verts, np.arange(self.n_vertices + 1))
            self._vertex_faces = [face_of[splits[k]:splits[k + 1]] for k in range(self.n_vertices)]
        return self._vertex_faces


@dataclass(frozen=True)
class NormalizeTransform:
    """Maps normalized-frame coordinates back to the original model frame."""

    center: np.ndarray
    scale: float

    def to_original(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) / self.scale + self.center

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) * self.scale


@dataclass
class SamplePoints:
    """Ordered vertex indices from farthest-point sampling plus the seed rule used."""

    indices: np.ndarray
    seed_rule: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class GeodesicMatrix:
    """Dense shortest-path distances over the vertex-edge graph.

    Rows index ``source_ids``, columns ``target_ids``. Unreachable pairs are
    filled with the largest finite computed distance and listed (as matrix
    index pairs) in ``unreachable_pairs``.
    """

    values: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    normalized: bool = False
    unreachable_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)

    @property
    def is_square(self) -> bool:
        return self.source_ids.shape == self.target_ids.shape and bool(
            (self.source_ids == self.target_ids).all()
        )

    @property
    def size(self) -> int:
        return len(self.source_ids)

    def row_for(self, vertex_id: int) -> np.ndarray:
        hits = np.flatnonzero(self.source_ids == vertex_id)
        if len(hits) == 0:
            raise KeyError(f"vertex {vertex_id} not among matrix sources")
        return self.values[hits[0]]


def _as_indices(points, n_vertices: int) -> np.ndarray:
    if points is None:
        return np.arange(n_vertices, dtype=np.int64)
    if isinstance(points, SamplePoints):
        return points.indices
    idx = np.asarray(points, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("vertex index list must be one-dimensional")
    if len(idx) and (idx.min() < 0 or idx.max() >= n_vertices):
        raise ValueError("vertex index out of range")
    return idx


def load_mesh(path) -> TriangleMesh:
    """Load a text triangle mesh (``v x y z`` / ``f i j k`` records, 1-based).

    Polygons with more than three vertices are fan-triangulated. Texture and
    normal sub-indices after ``/`` are ignored; negative indices are rejected.
    Degenerate faces (area below 1e-12 of the squared bbox diagonal) are
    dropped; the count is recorded on the returned mesh.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc

    vertices: list[list[float]] = []
    polys: list[list[int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"{path}:{lineno}: vertex record needs 3 coordinates")
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                value = int(head)
                if value < 0:
                    raise MeshError(f"{path}:{lineno}: negative face indices unsupported")
                idx.append(value - 1)
            if len(idx) < 3:
                raise MeshError(f"{path}:{lineno}: face record needs at least 3 indices")
            polys.append(idx)

    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    verts = np.asarray(vertices, dtype=np.float64)
    if not np.isfinite(verts).all():
        raise MeshError(f"{path}: non-finite vertex coordinates")

    faces: list[tuple[int, int, int]] = []
    for idx in polys:
        for k in range(1, len(idx) - 1):
            faces.append((idx[0], idx[k], idx[k + 1]))
    if not faces:
        raise MeshError(f"{path}: no faces found")
    tris = np.asarray(faces, dtype=np.int64)
    if tris.max() >= len(verts):
        raise MeshError(f"{path}: face index out of range")

    diag_sq = float(np.sum((verts.max(axis=0) - verts.min(axis=0)) ** 2))
    areas = 0.5 * np.linalg.norm(
        np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]]), axis=1
    )
    keep = areas >= DEGENERATE_AREA_REL * max(diag_sq, np.finfo(np.float64).tiny)
    dropped = int((~keep).sum())
    tris = tris[keep]
    if len(tris) == 0:
        raise MeshError(f"{path}: zero valid faces after dropping {dropped} degenerate faces")
    return TriangleMesh(verts, tris, dropped_faces=dropped)


def normalize(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizeTransform]:
    """Center the bbox at the origin and scale the longest bbox edge to 1."""
    center = mesh.bbox_center()
    extent = mesh.bbox_extent()
    longest = float(extent.max())
    if longest <= 0.0:
        raise MeshError("degenerate bounding box: zero extent on all axes")
    scale = 1.0 / longest
    out = TriangleMesh((mesh.vertices - center) * scale, mesh.faces, dropped_faces=mesh.dropped_faces)
    return out, NormalizeTransform(center=center, scale=scale)


def geodesic_distances(mesh: TriangleMesh, sources=None, targets=None) -> GeodesicMatrix:
    """Shortest-path distances over the vertex-edge graph, one Dijkstra per source.

    ``sources``/``targets`` accept SamplePoints, index arrays, or None (all
    vertices). The result is symmetrized when sources equal targets.
    Unreachable pairs are filled with the largest finite computed distance.
    """
    src = _as_indices(sources, mesh.n_vertices)
    tgt = _as_indices(targets, mesh.n_vertices)
    graph = mesh.edge_graph()
    dist = dijkstra(graph, directed=False, indices=src)
    dist = dist[:, tgt]

    unreachable = np.argwhere(~np.isfinite(dist))
    if len(unreachable):
        finite = dist[np.isfinite(dist)]
        fill = float(finite.max()) if len(finite) else 0.0
        dist = np.where(np.isfinite(dist), dist, fill * 1.0)

    square = src.shape == tgt.shape and bool((src == tgt).all())
    if square:
        dist = 0.5 * (dist + dist.T)
        np.fill_diagonal(dist, 0.0)
    return GeodesicMatrix(values=dist, source_ids=src, target_ids=tgt, unreachable_pairs=unreachable)


def normalize_distances(matrix: GeodesicMatrix, reference_max: float | None = None) -> GeodesicMatrix:
    """Divide all entries by ``reference_max`` (default: the matrix's own max).

    The reference is the max entry of the full candidate-set matrix on the
    shape, so sliced matrices (e.g. keypoint rows) normalize consistently.
    """
    base = float(matrix.values.max()) if reference_max is None else float(reference_max)
    if base <= 0.0:
        raise ValueError("cannot normalize an all-zero geodesic matrix")
    return GeodesicMatrix(
        values=matrix.values / base,
        source_ids=matrix.source_ids,
        target_ids=matrix.target_ids,
        normalized=True,
        unreachable_pairs=matrix.unreachable_pairs,
    )


MetricSource = Union[GeodesicMatrix, Callable[[int], np.ndarray]]


def _metric_row(metric: MetricSource, vertex_id: int, domain: np.ndarray) -> np.ndarray:
    if isinstance(metric, GeodesicMatrix):
        row = metric.row_for(vertex_id)
        # row is aligned with metric.target_ids; restrict to the FPS domain
        if len(metric.target_ids) == len(domain) and (metric.target_ids == domain).all():
            return row
        pos = {v: k for k, v in enumerate(metric.target_ids)}
        return row[[pos[v] for v in domain]]
    return np.asarray(metric(vertex_id), dtype=np.float64)[domain]


def farthest_point_sample(
    mesh: TriangleMesh,
    count: int,
    metric: MetricSource,
    seed_rule: str | int = "max-avg-geodesic",
) -> SamplePoints:
    """Greedy farthest-point sampling under the given metric.

    ``seed_rule`` is either ``"max-avg-geodesic"`` (vertex with maximal mean
    distance to all others; requires a full GeodesicMatrix) or a fixed vertex
    index. After the seed, each pick maximizes the minimum distance to the
    chosen set; ties break to the lowest vertex index.
    """
    if isinstance(metric, GeodesicMatrix):
        domain = metric.source_ids
    else:
        domain = np.arange(mesh.n_vertices, dtype=np.int64)
    if count < 1 or count > len(domain):
        raise ValueError(f"sample count {count} outside [1, {len(domain)}]")

    if isinstance(seed_rule, (int, np.integer)):
        seed = int(seed_rule)
        if seed not in set(domain.tolist()):
            raise ValueError(f"fixed seed vertex {seed} not in sampling domain")
        rule = f"fixed-index:{seed}"
    elif seed_rule == "max-avg-geodesic":
        if not isinstance(metric, GeodesicMatrix):
            raise ValueError("max-avg-geodesic seeding requires a full GeodesicMatrix")
        seed = int(domain[np.argmax(metric.values.mean(axis=1))])
        rule = "max-avg-geodesic"
    else:
        raise ValueError(f"unknown seed rule {seed_rule!r}")

    chosen = [seed]
    min_dist = _metric_row(metric, seed, domain).copy()
    for _ in range(count - 1):
        next_pos = int(np.argmax(min_dist))
        next_id = int(domain[next_pos])
        chosen.append(next_id)
        min_dist = np.minimum(min_dist, _metric_row(metric, next_id, domain))
    return SamplePoints(indices=np.asarray(chosen, dtype=np.int64), seed_rule=rule)
