import math

import numpy as np
import pytest

from backlift.geometry import TriangleMesh


def make_tetrahedron(scale: float = 1.0) -> TriangleMesh:
    verts = scale * np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    )
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(verts, faces)


def make_box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    ex, ey, ez = np.asarray(extents) / 2.0
    c = np.asarray(center, dtype=np.float64)
    verts = np.array(
        [
            [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
            [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
        ]
    ) + c
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # -z
            [4, 5, 6], [4, 6, 7],  # +z
            [0, 1, 5], [0, 5, 4],  # -y
            [3, 6, 2], [3, 7, 6],  # +y
            [0, 7, 3], [0, 4, 7],  # -x
            [1, 2, 6], [1, 6, 5],  # +x
        ]
    )
    return TriangleMesh(verts, faces)


def make_icosphere(subdivisions: int = 2, radius: float = 0.5) -> TriangleMesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        vlist = verts.tolist()

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = (np.asarray(vlist[a]) + np.asarray(vlist[b])) / 2.0
                m /= np.linalg.norm(m)
                midpoint[key] = len(vlist)
                vlist.append(m.tolist())
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces)
    return TriangleMesh(verts * radius, faces)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    path.write_text("\n".join(lines) + "\n")


def table_fixture(feature_scale: float = 3.0):
    """Symmetric 4-leg table assignment instance (n=12 candidates, k=4).

    Candidates 0-3 are leg tips with identical features, 4-7 the table
    corners, 8-11 the tabletop edge midpoints. Distances are shortest paths
    on the leg/tabletop edge graph, normalized by the candidate max; the
    template wants the 4 leg tips. Returns (template, candidates).
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    from backlift.keypoints import CandidateSet, FewShotTemplate

    leg, side = 0.25, 1.0
    edges = []
    for k in range(4):
        edges.append((k, 4 + k, leg))
        edges.append((4 + k, 8 + k, side / 2))
        edges.append((8 + k, 4 + (k + 1) % 4, side / 2))
    n = 12
    rows = [e[0] for e in edges] + [e[1] for e in edges]
    cols = [e[1] for e in edges] + [e[0] for e in edges]
    weights = [e[2] for e in edges] * 2
    graph = csr_matrix((weights, (rows, cols)), shape=(n, n))
    dist = shortest_path(graph, directed=False)
    dist_rel = dist / dist.max()

    feats = np.zeros((n, 2))
    feats[:4] = [feature_scale, 0.0]
    feats[4:] = [0.0, feature_scale]
    template = FewShotTemplate(
        semantic_ids=[0, 1, 2, 3],
        features=feats[:4].copy(),
        distances=dist_rel[:4, :4].copy(),
        sample_counts=np.ones(4, dtype=np.int64),
    )
    candidates = CandidateSet(
        vertex_ids=np.arange(n),
        features=feats,
        distances=dist_rel,
        positions=np.zeros((n, 3)),
    )
    return template, candidates


def hard_assignment_loss(assignment, template, candidates, alpha: float = 4.0) -> float:
    """Objective value of a hard keypoint->candidate assignment."""
    n = candidates.n
    sel = np.zeros((n, template.k))
    for j, i in enumerate(assignment):
        sel[i, j] = 1.0
    A = sel.T @ candidates.features - template.features
    B = sel.T @ candidates.distances @ sel - template.distances
    return float(np.linalg.norm(A) + alpha * np.linalg.norm(B))


AXIS_KEYPOINTS = [
    (0, (1.0, 0.0, 0.0)),
    (1, (-1.0, 0.0, 0.0)),
    (2, (0.0, 1.0, 0.0)),
    (3, (0.0, -1.0, 0.0)),
    (4, (0.0, 0.0, 1.0)),
    (5, (0.0, 0.0, -1.0)),
]


def build_demo_dataset(root, variants, subdivisions: int = 1, radius: float = 0.5):
    """Procedural dataset: anisotropically scaled icospheres with six
    axis-extreme keypoints annotated in the model frame.

    Returns (annotation json path, mesh dir, shape ids).
    """
    import json

    root.mkdir(parents=True, exist_ok=True)
    base = make_icosphere(subdivisions=subdivisions, radius=radius)
    records = []
    shape_ids = []
    for i, axis_scale in enumerate(variants):
        shape_id = f"shape{i}"
        verts = base.vertices * np.asarray(axis_scale)
        mesh = TriangleMesh(verts, base.faces)
        write_obj(root / f"{shape_id}.obj", mesh)
        kps = []
        for sid, direction in AXIS_KEYPOINTS:
            idx = int(np.argmax(verts @ np.asarray(direction)))
            kps.append({"semantic_id": sid, "xyz": verts[idx].tolist()})
        records.append({"class_id": "blob", "model_id": shape_id, "keypoints": kps})
        shape_ids.append(shape_id)
    ann = root / "annotations.json"
    ann.write_text(json.dumps(records))
    return ann, root, shape_ids


@pytest.fixture
def tetra() -> TriangleMesh:
    return make_tetrahedron()


@pytest.fixture
def box() -> TriangleMesh:
    return make_box()


@pytest.fixture(scope="session")
def icosphere() -> TriangleMesh:
    return make_icosphere(subdivisions=2, radius=0.5)


@pytest.fixture(scope="session")
def icosphere_fine() -> TriangleMesh:
    return make_icosphere(subdivisions=3, radius=0.5)
