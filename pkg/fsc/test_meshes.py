"""
Tests for triangle meshes and the procedural primitive corpus
"""

import numpy as np
import pytest
from errors import EmptyInput
from meshes import (
    CATEGORIES,
    TriangleMesh,
    box,
    bracket,
    make_primitive,
    primitive_corpus,
    random_rotation,
    sphere,
    torus,
)


class TestTriangleMesh:
    """Test mesh validation and transforms"""

    def test_box_surface_area(self):
        mesh = box((1.0, 2.0, 3.0))
        assert mesh.areas().sum() == pytest.approx(2 * (2 + 3 + 6))

    def test_degenerate_triangles_are_dropped(self):
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        mesh = TriangleMesh(vertices, [[0, 1, 2], [0, 1, 3]])
        assert len(mesh) == 1

    def test_index_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_non_finite_vertices(self):
        with pytest.raises(ValueError):
            TriangleMesh([[0, 0, np.inf], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_normalized_fits_unit_ball(self):
        mesh = box((4.0, 1.0, 1.0), center=(5.0, 5.0, 5.0)).normalized()
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert radii.max() == pytest.approx(1.0)
        corners = mesh.corners()
        centroid = (corners.mean(axis=1) * mesh.areas()[:, None]).sum(axis=0) / mesh.areas().sum()
        np.testing.assert_allclose(centroid, 0.0, atol=1e-12)

    def test_normalizing_empty_mesh(self):
        with pytest.raises(EmptyInput):
            TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))).normalized()

    def test_merge_offsets_indices(self):
        merged = box().merged(box(center=(3.0, 0.0, 0.0)))
        assert len(merged) == 24
        assert merged.triangles.max() == 15

    def test_rotation_is_proper(self, rng):
        rotation = random_rotation(rng)
        np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_rotation_preserves_area(self, rng):
        mesh = bracket()
        turned = mesh.transformed(random_rotation(rng), (1.0, 2.0, 3.0))
        assert turned.areas().sum() == pytest.approx(mesh.areas().sum())

    def test_surface_mirrors_arrays(self):
        mesh = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 2, 0], [3, 3, 3]], [[0, 1, 2], [0, 1, 0]])
        assert len(mesh.surface.faces) == len(mesh) == 1
        np.testing.assert_array_equal(mesh.surface.vertices, mesh.vertices)
        assert mesh.areas().tolist() == [2.0]

    def test_centroid_weights_by_area(self):
        # a big and a small triangle, centroids at x=2/3 and x=10+1/3
        mesh = TriangleMesh(
            [[0, 0, 0], [2, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]],
            [[0, 1, 2], [3, 4, 5]],
        )
        expected = (2.0 * (2 / 3) + 0.5 * (10 + 1 / 3)) / 2.5
        assert mesh.centroid()[0] == pytest.approx(expected)

    def test_vertices_are_read_only(self):
        with pytest.raises(ValueError):
            box().vertices[0, 0] = 5.0


class TestPrimitives:
    """Test the generators and the corpus"""

    def test_sphere_is_closed_and_round(self):
        mesh = sphere(1.0)
        np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0)
        # every edge is shared by exactly two triangles
        edges = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert np.all(counts == 2)

    def test_torus_area(self):
        mesh = torus(0.7, 0.25, rings=96, segments=48)
        assert mesh.areas().sum() == pytest.approx(4 * np.pi**2 * 0.7 * 0.25, rel=0.01)

    @pytest.mark.parametrize("category", CATEGORIES)
    def test_every_category_is_normalized(self, category):
        mesh = make_primitive(category, np.random.default_rng(0))
        assert len(mesh) > 0
        assert np.linalg.norm(mesh.vertices, axis=1).max() == pytest.approx(1.0)

    def test_unknown_category(self):
        with pytest.raises(ValueError, match="Unknown primitive category"):
            make_primitive("teapot", np.random.default_rng(0))

    def test_corpus_ids_and_determinism(self):
        first = primitive_corpus(2, 5, categories=("box", "torus"))
        second = primitive_corpus(2, 5, categories=("box", "torus"))
        assert [m.id for m in first] == ["box-000", "box-001", "torus-000", "torus-001"]
        assert [m.category for m in first] == ["box", "box", "torus", "torus"]
        for a, b in zip(first, second, strict=True):
            np.testing.assert_array_equal(a.vertices, b.vertices)

    def test_members_differ(self):
        a, b = primitive_corpus(2, 0, categories=("cylinder",))
        assert not np.array_equal(a.vertices, b.vertices)
