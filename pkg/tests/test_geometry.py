import math

import numpy as np
import pytest

from backlift.geometry import (
    GeodesicMatrix,
    MeshError,
    TriangleMesh,
    farthest_point_sample,
    geodesic_distances,
    load_mesh,
    normalize,
    normalize_distances,
)
from conftest import make_box, make_icosphere, make_tetrahedron, write_obj


def chain_matrix(spacings):
    """Square geodesic matrix for points on a line with the given gaps."""
    pos = np.concatenate([[0.0], np.cumsum(spacings)])
    values = np.abs(pos[:, None] - pos[None, :])
    ids = np.arange(len(pos))
    return GeodesicMatrix(values=values, source_ids=ids, target_ids=ids)


class TestLoadMesh:
    def test_unit_tetrahedron(self, tmp_path):
        path = tmp_path / "tetra.obj"
        write_obj(path, make_tetrahedron())
        mesh = load_mesh(path)
        assert mesh.n_vertices == 4
        assert mesh.n_faces == 4
        assert mesh.dropped_faces == 0

    def test_quad_fan_triangulation(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_mesh(path)
        assert mesh.n_faces == 2
        # both triangles share the diagonal 0-2
        assert set(mesh.faces[0]) & set(mesh.faces[1]) == {0, 2}

    def test_degenerate_face_dropped(self, tmp_path):
        mesh = make_icosphere(0)
        lines = [f"v {v[0]} {v[1]} {v[2]}" for v in mesh.vertices]
        lines += [f"f {f[0]+1} {f[1]+1} {f[2]+1}" for f in mesh.faces[:9]]
        lines.append("f 1 1 2")  # repeated vertex, zero area
        path = tmp_path / "degen.obj"
        path.write_text("\n".join(lines) + "\n")
        loaded = load_mesh(path)
        assert loaded.n_faces == 9
        assert loaded.dropped_faces == 1

    def test_subindices_ignored(self, tmp_path):
        path = tmp_path / "slash.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n"
        )
        mesh = load_mesh(path)
        assert mesh.n_faces == 1

    def test_negative_indices_rejected(self, tmp_path):
        path = tmp_path / "neg.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -1 -2 -3\n")
        with pytest.raises(MeshError):
            load_mesh(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MeshError):
            load_mesh(tmp_path / "nope.obj")

    def test_nonfinite_coordinates(self, tmp_path):
        path = tmp_path / "nan.obj"
        path.write_text("v nan 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\n")
        with pytest.raises(MeshError):
            load_mesh(path)

    def test_zero_valid_faces(self, tmp_path):
        path = tmp_path / "flat.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 3 0 0\nf 1 2 3\n")
        with pytest.raises(MeshError):
            load_mesh(path)


class TestMeshInvariants:
    def test_face_index_out_of_range(self):
        with pytest.raises(MeshError):
            TriangleMesh(np.zeros((4, 3)) + np.eye(4, 3), [[0, 1, 9]])

    def test_too_few_vertices(self):
        with pytest.raises(MeshError):
            TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_repeated_vertex_in_face(self, tetra):
        with pytest.raises(MeshError):
            TriangleMesh(tetra.vertices, [[0, 0, 1]])


class TestNormalize:
    def test_symmetric_cube(self):
        mesh = make_box(extents=(4.0, 4.0, 4.0))
        out, transform = normalize(mesh)
        assert transform.scale == pytest.approx(0.25)
        assert np.allclose(transform.center, 0.0)
        assert np.allclose(out.bbox_extent().max(), 1.0, atol=1e-6)

    def test_shifted_box(self):
        mesh = make_box(extents=(2.0, 1.0, 0.5), center=(1.0, 0.0, 0.0))
        out, transform = normalize(mesh)
        assert transform.scale == pytest.approx(0.5)
        assert np.allclose(transform.center, [1.0, 0.0, 0.0])
        assert np.allclose(out.bbox_center(), 0.0, atol=1e-9)
        assert out.bbox_extent().max() == pytest.approx(1.0, abs=1e-6)

    def test_idempotent(self, icosphere):
        once, _ = normalize(icosphere)
        twice, _ = normalize(once)
        assert np.allclose(once.vertices, twice.vertices, atol=1e-9)

    def test_roundtrip_transform(self, tetra):
        out, transform = normalize(tetra)
        assert np.allclose(transform.to_original(out.vertices), tetra.vertices, atol=1e-12)


class TestGeodesics:
    def test_single_edge(self, tmp_path):
        verts = np.array([[0, 0, 0], [0.3, 0, 0], [0.15, 0.5, 0], [0.15, 0.2, 0.4]])
        mesh = TriangleMesh(verts, [[0, 1, 2], [0, 1, 3]])
        g = geodesic_distances(mesh, [0, 1], [0, 1])
        assert g.values[0, 1] == pytest.approx(0.3)

    def test_chain_path(self):
        # squashed strip: path v0-v1-v2 along the base with unit edges
        verts = np.array(
            [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0.5, 3, 0], [1.5, 3, 0]], dtype=float
        )
        mesh = TriangleMesh(verts, [[0, 1, 3], [1, 4, 3], [1, 2, 4]])
        g = geodesic_distances(mesh, [0, 2], [0, 2])
        assert g.values[0, 1] == pytest.approx(2.0)

    def test_icosphere_antipodal(self, icosphere_fine):
        r = 0.5
        verts = icosphere_fine.vertices
        top = int(np.argmax(verts[:, 1]))
        bottom = int(np.argmin(verts[:, 1]))
        g = geodesic_distances(icosphere_fine, [top, bottom], [top, bottom])
        exact = math.pi * r
        # chord paths may undercut the smooth arc slightly; the bound is two-sided
        assert abs(g.values[0, 1] - exact) <= 0.12 * exact

    def test_symmetry_diag_triangle(self, icosphere):
        g = geodesic_distances(icosphere)
        assert np.allclose(g.values, g.values.T, atol=1e-9)
        assert np.all(np.diag(g.values) == 0.0)
        rng = np.random.default_rng(0)
        n = g.size
        triples = rng.integers(0, n, size=(1000, 3))
        d = g.values
        lhs = d[triples[:, 0], triples[:, 2]]
        rhs = d[triples[:, 0], triples[:, 1]] + d[triples[:, 1], triples[:, 2]]
        assert np.all(lhs <= rhs + 1e-9)

    def test_rigid_motion_invariance(self, tetra):
        g0 = geodesic_distances(tetra)
        angle = 0.7
        R = np.array(
            [
                [math.cos(angle), -math.sin(angle), 0],
                [math.sin(angle), math.cos(angle), 0],
                [0, 0, 1],
            ]
        )
        moved = TriangleMesh(tetra.vertices @ R.T + np.array([3.0, -2.0, 0.5]), tetra.faces)
        g1 = geodesic_distances(moved)
        assert np.allclose(g0.values, g1.values, atol=1e-6)

    def test_disconnected_components_filled(self):
        a = make_tetrahedron()
        b = make_tetrahedron()
        verts = np.concatenate([a.vertices, b.vertices + 10.0])
        faces = np.concatenate([a.faces, b.faces + 4])
        mesh = TriangleMesh(verts, faces)
        g = geodesic_distances(mesh)
        assert len(g.unreachable_pairs) == 2 * 4 * 4
        max_finite = geodesic_distances(a).values.max()
        assert g.values[0, 4] == pytest.approx(max_finite)


class TestNormalizeDistances:
    def test_division(self):
        g = chain_matrix([0.5, 1.5])
        out = normalize_distances(g)
        assert out.values.max() == 1.0
        assert out.values[0, 1] == pytest.approx(0.25)
        assert out.normalized

    def test_idempotent(self):
        g = normalize_distances(chain_matrix([1.0, 1.0]))
        again = normalize_distances(g)
        assert np.array_equal(g.values, again.values)

    def test_scale_invariance(self, tetra):
        g1 = normalize_distances(geodesic_distances(tetra))
        big = TriangleMesh(tetra.vertices * 3.0, tetra.faces)
        g3 = normalize_distances(geodesic_distances(big))
        assert np.allclose(g1.values, g3.values, atol=1e-12)

    def test_all_zero_rejected(self):
        g = GeodesicMatrix(np.zeros((3, 3)), np.arange(3), np.arange(3))
        with pytest.raises(ValueError):
            normalize_distances(g)

    def test_reference_max(self):
        g = chain_matrix([1.0, 1.0])
        out = normalize_distances(g, reference_max=4.0)
        assert out.values.max() == pytest.approx(0.5)


class TestFarthestPointSample:
    def test_exhaustion(self, tetra):
        g = geodesic_distances(tetra)
        sample = farthest_point_sample(tetra, 4, g)
        assert sorted(sample.indices.tolist()) == [0, 1, 2, 3]

    def test_chain_brute_force(self, tetra):
        # 5 equally spaced points on a line; tetra only provides the vertex budget
        g = chain_matrix([1.0, 1.0, 1.0, 1.0])
        sample = farthest_point_sample(tetra, 2, g, seed_rule="max-avg-geodesic")
        # brute force: endpoints maximize both the mean-distance seed and the spread
        means = g.values.mean(axis=1)
        assert means[sample.indices[0]] == means.max()
        assert set(sample.indices.tolist()) == {0, 4}

    def test_count_one(self, tetra):
        g = geodesic_distances(tetra)
        sample = farthest_point_sample(tetra, 1, g)
        assert len(sample) == 1

    def test_count_too_large(self, tetra):
        g = geodesic_distances(tetra)
        with pytest.raises(ValueError):
            farthest_point_sample(tetra, 5, g)

    def test_monotone_min_distance(self, icosphere):
        g = geodesic_distances(icosphere)
        sample = farthest_point_sample(icosphere, 20, g)
        gaps = []
        chosen = [sample.indices[0]]
        for idx in sample.indices[1:]:
            gaps.append(min(g.values[idx, c] for c in chosen))
            chosen.append(idx)
        assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))

    def test_deterministic(self, icosphere):
        g = geodesic_distances(icosphere)
        s1 = farthest_point_sample(icosphere, 10, g)
        s2 = farthest_point_sample(icosphere, 10, g)
        assert np.array_equal(s1.indices, s2.indices)

    def test_fixed_seed(self, tetra):
        g = geodesic_distances(tetra)
        sample = farthest_point_sample(tetra, 2, g, seed_rule=2)
        assert sample.indices[0] == 2
        assert sample.seed_rule == "fixed-index:2"

    def test_callback_metric(self, icosphere):
        g = geodesic_distances(icosphere)
        via_matrix = farthest_point_sample(icosphere, 8, g, seed_rule=0)
        via_callback = farthest_point_sample(
            icosphere, 8, lambda vid: g.values[vid], seed_rule=0
        )
        assert np.array_equal(via_matrix.indices, via_callback.indices)
