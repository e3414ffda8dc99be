import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_closest, perturbed_sphere
from smdm.geometry import (TriangleIndex, barycentric, closest_point, closest_points,
                           closest_points_on_triangles)
from smdm.shapes import fibonacci_sphere, grid_patch, icosphere, unit_square


def test_query_at_vertex_is_zero():
    m = icosphere(2)
    p, d, _ = closest_point(m, m.vertices[17])
    assert d == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(p, m.vertices[17])


def test_orthogonal_projection_onto_square():
    p, d, f = closest_point(unit_square(), (0.25, 0.25, 5.0))
    assert np.allclose(p, (0.25, 0.25, 0.0))
    assert d == pytest.approx(5.0)
    assert f in (0, 1)


def test_outside_corner_clamps_to_vertex():
    p, d, _ = closest_point(unit_square(), (-1.0, -1.0, 0.0))
    assert np.allclose(p, (0, 0, 0))
    assert d == pytest.approx(np.sqrt(2))


def test_thousand_queries_match_brute_force(rng):
    m = perturbed_sphere(2, 0.08, 5)
    pts = rng.uniform(-14, 14, (1000, 3))
    _, d, f = closest_points(m, pts)
    ref = brute_closest(pts, m)
    assert np.abs(d - ref).max() < 1e-9
    # the reported triangle realizes the distance
    tri = m.vertices[m.triangles[f]]
    cp = closest_points_on_triangles(pts, tri[:, 0], tri[:, 1], tri[:, 2])
    assert np.allclose(np.linalg.norm(cp - pts, axis=1), d, atol=1e-9)


def test_far_queries_use_fallback_path(rng):
    # many triangles inside the reach of a far query exceeds the fixed neighbor list
    m = fibonacci_sphere(600)
    pts = rng.normal(size=(50, 3)) * 40
    _, d, _ = TriangleIndex(m).query(pts)
    assert np.abs(d - brute_closest(pts, m)).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), spread=st.floats(0.1, 30.0))
def test_index_equals_brute_force_property(seed, spread):
    rng = np.random.default_rng(seed)
    m = grid_patch(4, 5, 1.0, jitter=0.3, seed=seed % 97)
    m = m.with_vertices(m.vertices + [0, 0, 1] * rng.normal(0, 0.3, (m.n_vertices, 1)))
    pts = rng.normal(size=(20, 3)) * spread
    _, d, _ = closest_points(m, pts)
    assert np.abs(d - brute_closest(pts, m)).max() < 1e-9


def test_closest_point_lies_on_triangle(rng):
    a, b, c = (rng.standard_normal((200, 3)) for _ in range(3))
    p = rng.standard_normal((200, 3)) * 3
    cp = closest_points_on_triangles(p, a, b, c)
    bc = barycentric(cp, a, b, c)
    assert np.all(bc > -1e-9)
    assert np.allclose(bc.sum(axis=1), 1.0)
    assert np.allclose(np.einsum("ki,kij->kj", bc, np.stack([a, b, c], axis=1)), cp)
