"""Tests for Delaunay/alpha-shape contours, point classification and k-NN."""

from __future__ import annotations

import numpy as np
import pytest

from src.alphashape import (
    AlphaPolygon,
    AlphaShapeError,
    Location,
    NEAR_DUPLICATE_JITTER,
    alpha_shape,
    circumradii,
    classify_points,
    delaunay_2d,
    interior_points,
    knn_projected,
    point_in_polygon,
)
from src.cache_manager import build_frame
from src.geometry import look_at, make_icosphere, make_intrinsics


def _lattice(size: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(size + 1), np.arange(size + 1))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _l_shape() -> np.ndarray:
    points = _lattice(4)
    return points[~((points[:, 0] > 2) & (points[:, 1] > 2))]


def _square(lo: float, hi: float) -> AlphaPolygon:
    return AlphaPolygon(vertices=np.array([[lo, lo], [hi, lo], [hi, hi], [lo, hi]], dtype=np.float64))


def test_delaunay_ignores_input_order_and_duplicates():
    points = np.random.default_rng(0).uniform(0, 10, size=(40, 2))
    shuffled = np.concatenate([points[::-1], points[:5]])
    a, b = delaunay_2d(points), delaunay_2d(shuffled)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.triangles, b.triangles)
    # Every triangle is counter-clockwise
    p = a.points[a.triangles]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    assert np.all(cross > 0)


def test_near_duplicates_are_jittered_deterministically():
    near = np.array([[1.0 + 4e-10, 1.0]])
    points = np.concatenate([_lattice(3), near])
    first = delaunay_2d(points)
    again = delaunay_2d(np.concatenate([near, _lattice(3)[::-1]]))
    assert np.array_equal(first.points, again.points)
    assert np.array_equal(first.triangles, again.triangles)
    assert len(first.points) == 17
    # Only the later point of the close pair moves, and by at most 1e-9
    lattice = {tuple(p) for p in _lattice(3)}
    kept = [p for p in first.points if tuple(p) in lattice]
    moved = [p for p in first.points if tuple(p) not in lattice]
    assert len(kept) == 16 and len(moved) == 1
    assert np.linalg.norm(moved[0] - near[0]) <= NEAR_DUPLICATE_JITTER
    assert np.array_equal(delaunay_2d(_lattice(3)).points, np.unique(_lattice(3), axis=0))


def test_degenerate_inputs_are_rejected():
    with pytest.raises(AlphaShapeError):
        delaunay_2d(np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(AlphaShapeError):
        alpha_shape(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]), 0.0)
    with pytest.raises(AlphaShapeError):
        alpha_shape(_lattice(3), -1.0)


def test_circumradius_of_right_triangle():
    points = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    radii = circumradii(points, np.array([[0, 1, 2], [1, 3, 2]]))
    assert radii[0] == pytest.approx(np.sqrt(2.0))
    # Collinear triple
    assert np.isinf(radii[1])


def test_alpha_zero_gives_convex_hull():
    hull = alpha_shape(_l_shape(), 0.0)
    assert hull.area == pytest.approx(14.0)
    # Counter-clockwise, closing vertex implied
    assert hull.area > 0
    assert not np.array_equal(hull.vertices[0], hull.vertices[-1])


def test_alpha_follows_concavity():
    shape = alpha_shape(_l_shape(), 1.0)
    # The unit cells of the L plus at most one half cell at the inner corner
    assert 12.0 - 1e-9 <= shape.area <= 12.5 + 1e-9
    assert point_in_polygon(shape, (1.0, 1.5)) == Location.INSIDE
    assert point_in_polygon(shape, (2.9, 2.9)) == Location.OUTSIDE
    assert point_in_polygon(alpha_shape(_l_shape(), 0.0), (2.9, 2.9)) == Location.INSIDE


def test_alpha_too_large_keeps_nothing():
    with pytest.raises(AlphaShapeError):
        alpha_shape(_lattice(3), 10.0)


def test_disconnected_region_keeps_largest_component():
    big = _lattice(3)
    small = _lattice(1) + np.array([20.0, 0.0])
    shape = alpha_shape(np.concatenate([small, big]), 1.0)
    assert shape.area == pytest.approx(9.0)
    assert point_in_polygon(shape, (20.5, 0.5)) == Location.OUTSIDE


def test_classify_points_locations():
    square = _square(0.0, 4.0)
    points = np.array([[2.0, 2.0], [0.0, 2.0], [4.0, 4.0], [5.0, 2.0], [2.0, -0.5], [4.0, 1e-3]])
    assert classify_points(square, points).tolist() == [
        Location.INSIDE,
        Location.BOUNDARY,
        Location.BOUNDARY,
        Location.OUTSIDE,
        Location.OUTSIDE,
        Location.BOUNDARY,
    ]


def test_interior_points_excludes_occupied_pixels():
    intr = make_intrinsics(8, 8, 60.0)
    square = _square(1.0, 5.0)
    pixels = interior_points(square, intr)
    assert len(pixels) == 25
    assert pixels[0].tolist() == [1, 1]
    pixels = interior_points(square, intr, exclude=np.array([[1, 1], [5, 5]]))
    assert len(pixels) == 23
    assert pixels[0].tolist() == [1, 2]
    # Row-major order
    flat = pixels[:, 0] * intr.width + pixels[:, 1]
    assert np.all(np.diff(flat) > 0)


def test_interior_points_clip_to_grid():
    intr = make_intrinsics(4, 3, 60.0)
    pixels = interior_points(_square(-10.0, 10.0), intr)
    assert len(pixels) == 12
    assert pixels.max(axis=0).tolist() == [2, 3]


def test_knn_ties_prefer_smaller_index():
    sites = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]])
    table = knn_projected(sites, np.array([[0.0, 0.0]]), 2)
    assert table.indices.tolist() == [[1, 2]]
    assert table.distances.tolist() == [[1.0, 1.0]]
    table = knn_projected(sites, np.array([[0.0, 0.0]]), 4)
    assert table.indices.tolist() == [[1, 2, 3, 4]]
    assert table.k == 4


def test_knn_matches_exhaustive_search():
    rng = np.random.default_rng(5)
    sites = rng.integers(0, 30, size=(60, 2)).astype(np.float64)
    sites = np.unique(sites, axis=0)
    queries = rng.integers(0, 30, size=(200, 2)).astype(np.float64) + 0.5
    table = knn_projected(sites, queries, 5)
    for row, query in enumerate(queries):
        dist = np.linalg.norm(sites - query, axis=1)
        expected = np.lexsort((np.arange(len(sites)), dist))[:5]
        assert table.indices[row].tolist() == expected.tolist()
        assert np.allclose(table.distances[row], dist[expected])
    assert np.all(np.diff(table.distances, axis=1) >= 0)


def test_knn_errors():
    sites = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(AlphaShapeError):
        knn_projected(sites, np.array([[0.5, 0.5]]), 3)
    with pytest.raises(AlphaShapeError):
        knn_projected(sites, np.array([[1.0, 0.0]]), 1)
    empty = knn_projected(sites, np.zeros((0, 2)), 2)
    assert empty.indices.shape == (0, 2)


def test_unit_square_examples():
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert len(delaunay_2d(corners).triangles) == 2
    hull = alpha_shape(corners, 0.0)
    assert hull.area == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(AlphaShapeError, match="0.707"):
        alpha_shape(corners, 10.0)
    square = _square(0.0, 1.0)
    assert point_in_polygon(square, (0.5, 0.5)) == Location.INSIDE
    assert point_in_polygon(square, (2.0, 0.0)) == Location.OUTSIDE
    assert point_in_polygon(square, (1.0, 0.5)) == Location.BOUNDARY


def test_delaunay_empty_circumcircle():
    points = np.random.default_rng(12).uniform(0, 1, size=(200, 2))
    tri = delaunay_2d(points)
    p = tri.points
    for a, b, c in tri.triangles:
        # Circumcentre from the perpendicular bisector equations
        ax, ay = p[a]
        bx, by = p[b]
        cx, cy = p[c]
        d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
        uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
        radius = np.hypot(ax - ux, ay - uy)
        others = np.hypot(p[:, 0] - ux, p[:, 1] - uy)
        others[[a, b, c]] = np.inf
        assert np.all(others >= radius * (1 - 1e-9))


def test_concave_region_contains_every_input_point():
    points = _l_shape()
    shape = alpha_shape(points, 1.0)
    assert shape.area < alpha_shape(points, 0.0).area
    assert np.all(classify_points(shape, points) != Location.OUTSIDE)


def test_interior_point_counts_on_small_square():
    intr = make_intrinsics(8, 8, 60.0)
    square = _square(2.0, 5.0)
    assert len(interior_points(square, intr)) == 16
    corners = np.array([[2, 2], [2, 5], [5, 2], [5, 5]])
    assert len(interior_points(square, intr, exclude=corners)) == 12


def test_interior_points_match_per_pixel_sweep():
    intr = make_intrinsics(24, 24, 60.0)
    frame = build_frame(make_icosphere(2), look_at((0.0, 0.0, 3.0)), intr, 0.0, 3)
    shape = alpha_shape(frame.sites.coords(), 0.0)
    swept = []
    for row in range(intr.height):
        for col in range(intr.width):
            if point_in_polygon(shape, (col, row)) != Location.OUTSIDE:
                swept.append((row, col))
    occupied = {tuple(p) for p in frame.sites.pixels.tolist()}
    expected = [p for p in swept if p not in occupied]
    assert [tuple(p) for p in frame.interior.tolist()] == expected


def test_knn_line_examples():
    sites = np.stack([np.arange(10.0), np.zeros(10)], axis=1)
    table = knn_projected(sites, np.array([[0.4, 0.0]]), 2)
    assert table.indices.tolist() == [[0, 1]]
    assert np.allclose(table.distances, [[0.4, 0.6]])
    table = knn_projected(sites, np.array([[3.2, 0.5]]), 10)
    assert sorted(table.indices[0].tolist()) == list(range(10))
    assert np.all(np.diff(table.distances[0]) >= 0)
