"""Alpha-shape contours, point-in-polygon tests and k-NN tables.

2D points here are ``(x, y)`` pairs; for projected pixels that is
``(col, row)``. Lattice results are returned as ``(row, col)`` pixels.

Alpha convention: a Delaunay triangle is kept when its circumradius is
below ``1 / alpha``; ``alpha = 0`` keeps every triangle (convex hull).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree
from shapely.geometry import MultiPolygon, Polygon
from shapely.geometry.polygon import orient
from shapely.ops import unary_union

from .geometry import Intrinsics
from .utils.logger import get_logger

logger = get_logger(__name__)

BOUNDARY_TOLERANCE = 1e-9
_COLLINEAR_TOLERANCE = 1e-12
# distinct points closer than this are nudged apart by at most NEAR_DUPLICATE_JITTER
NEAR_DUPLICATE_DISTANCE = 1e-9
NEAR_DUPLICATE_JITTER = 1e-9
_JITTER_SEED = 0
_CLASSIFY_CHUNK = 4096


class AlphaShapeError(ValueError):
    """Raised for degenerate point sets or empty alpha regions."""
    pass


class Location(IntEnum):
    OUTSIDE = 0
    INSIDE = 1
    BOUNDARY = 2


@dataclass(frozen=True)
class Triangulation2D:
    """Delaunay triangulation with CCW-oriented triangles."""

    points: np.ndarray
    triangles: np.ndarray


@dataclass(frozen=True)
class AlphaPolygon:
    """One simple closed CCW contour; the closing vertex is implied."""

    vertices: np.ndarray

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class KnnTable:
    """k nearest sites per query, ascending by distance (ties: smaller site index)."""

    indices: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _unique_sorted(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    # lexicographic on (x, y), exact duplicates removed
    return np.unique(points, axis=0)


def _separate_near_duplicates(points: np.ndarray) -> np.ndarray:
    """Move the later point of every near-coincident pair by a seeded offset.

    ``points`` must already be sorted, so the result does not depend on input
    order. Offsets have norm at most ``NEAR_DUPLICATE_JITTER``.
    """
    if len(points) < 2:
        return points
    pairs = cKDTree(points).query_pairs(NEAR_DUPLICATE_DISTANCE, output_type="ndarray")
    if len(pairs) == 0:
        return points
    moved = np.unique(pairs.max(axis=1))
    rng = np.random.default_rng(_JITTER_SEED)
    offsets = rng.uniform(-1.0, 1.0, size=(len(moved), 2)) * (NEAR_DUPLICATE_JITTER / np.sqrt(2.0))
    jittered = points.copy()
    jittered[moved] += offsets
    logger.debug("Jittered %d near-duplicate points", len(moved))
    return jittered


def delaunay_2d(points: np.ndarray) -> Triangulation2D:
    """Delaunay triangulation of the distinct input points.

    Points are deduplicated and sorted lexicographically before Qhull runs,
    so the output does not depend on input order. Distinct points closer than
    ``NEAR_DUPLICATE_DISTANCE`` are separated by a seeded jitter of at most
    ``NEAR_DUPLICATE_JITTER``; ``points`` of the result carry the jitter.

    Raises
    ------
    AlphaShapeError
        If fewer than three distinct points remain or all are collinear.
    """
    unique = _separate_near_duplicates(_unique_sorted(points))
    if len(unique) < 3:
        raise AlphaShapeError(f"need at least 3 distinct points, got {len(unique)}")
    centered = unique - unique.mean(axis=0)
    scale = max(float(np.abs(centered).max()), 1.0)
    if np.linalg.matrix_rank(centered / scale, tol=_COLLINEAR_TOLERANCE) < 2:
        raise AlphaShapeError("all points are collinear")
    try:
        tri = Delaunay(unique)
    except QhullError as e:
        raise AlphaShapeError(f"triangulation failed: {e}")
    simplices = tri.simplices.astype(np.int64)
    a, b, c = unique[simplices[:, 0]], unique[simplices[:, 1]], unique[simplices[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    clockwise = cross < 0
    simplices[clockwise] = simplices[clockwise][:, [0, 2, 1]]
    return Triangulation2D(points=unique, triangles=simplices)


def circumradii(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Circumradius of every triangle; ``inf`` for zero-area triangles."""
    a, b, c = points[triangles[:, 0]], points[triangles[:, 1]], points[triangles[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    twice_area = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    with np.errstate(divide="ignore"):
        return np.where(twice_area > 0, la * lb * lc / (2.0 * twice_area), np.inf)


def alpha_shape(points: np.ndarray, alpha: float) -> AlphaPolygon:
    """Outer contour of the alpha complex of ``points``.

    Keeps Delaunay triangles with circumradius below ``1 / alpha`` and
    returns the exterior ring of their union. When the kept region splits
    into several components the largest by area wins and a warning is
    logged. Holes in the kept region are filled.
    """
    if alpha < 0:
        raise AlphaShapeError(f"alpha cannot be negative, got {alpha}")
    tri = delaunay_2d(points)
    radii = circumradii(tri.points, tri.triangles)
    limit = np.inf if alpha == 0 else 1.0 / alpha
    kept = tri.triangles[radii < limit]
    if len(kept) == 0:
        raise AlphaShapeError(
            f"alpha={alpha} keeps no triangles: radius limit {limit:.6g} but the smallest circumradius is {radii.min():.6g}"
        )
    region = unary_union([Polygon(tri.points[t]) for t in kept])
    if isinstance(region, MultiPolygon):
        parts = sorted(region.geoms, key=lambda g: g.area, reverse=True)
        logger.warning(
            "Alpha region has %d components; keeping the largest (area %.3f of %.3f)",
            len(parts), parts[0].area, region.area,
        )
        region = parts[0]
    exterior = orient(Polygon(region.exterior), sign=1.0).exterior
    vertices = np.asarray(exterior.coords, dtype=np.float64)[:-1]
    return AlphaPolygon(vertices=vertices)


def classify_points(poly: AlphaPolygon, points: np.ndarray) -> np.ndarray:
    """Even-odd crossing test with explicit boundary detection.

    Returns
    -------
    np.ndarray
        int8 array of ``Location`` values, one per point.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    start, end = poly.edges
    ax, ay = start[:, 0], start[:, 1]
    bx, by = end[:, 0], end[:, 1]
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    result = np.empty(len(points), dtype=np.int8)
    for begin in range(0, len(points), _CLASSIFY_CHUNK):
        chunk = points[begin:begin + _CLASSIFY_CHUNK]
        px, py = chunk[:, 0:1], chunk[:, 1:2]
        with np.errstate(divide="ignore", invalid="ignore"):
            straddles = (ay > py) != (by > py)
            x_cross = ax + (py - ay) * dx / np.where(dy == 0, 1.0, dy)
            crossings = np.count_nonzero(straddles & (px < x_cross), axis=1)
            proj = np.clip(((px - ax) * dx + (py - ay) * dy) / np.where(length_sq == 0, 1.0, length_sq), 0.0, 1.0)
        dist = np.hypot(px - (ax + proj * dx), py - (ay + proj * dy)).min(axis=1)
        location = np.where(crossings % 2 == 1, Location.INSIDE, Location.OUTSIDE)
        location[dist < BOUNDARY_TOLERANCE] = Location.BOUNDARY
        result[begin:begin + len(chunk)] = location
    return result


def point_in_polygon(poly: AlphaPolygon, point: Iterable[float]) -> Location:
    """Classify a single ``(x, y)`` point against ``poly``."""
    return Location(int(classify_points(poly, np.asarray(list(point), dtype=np.float64))[0]))


def interior_points(poly: AlphaPolygon, intr: Intrinsics, exclude: Optional[np.ndarray] = None) -> np.ndarray:
    """Lattice pixels inside or on ``poly``, minus ``exclude``.

    Parameters
    ----------
    poly: AlphaPolygon
        Contour in ``(x, y)`` = ``(col, row)`` coordinates.
    intr: Intrinsics
        Supplies the grid size; the polygon is clipped to it.
    exclude: np.ndarray, optional
        (n, 2) ``(row, col)`` pixels to drop (the occupied pixels).

    Returns
    -------
    np.ndarray
        (q, 2) int64 ``(row, col)`` pixels in row-major order.
    """
    lo = np.floor(poly.vertices.min(axis=0)).astype(np.int64)
    hi = np.ceil(poly.vertices.max(axis=0)).astype(np.int64)
    col_lo, row_lo = max(lo[0], 0), max(lo[1], 0)
    col_hi, row_hi = min(hi[0], intr.width - 1), min(hi[1], intr.height - 1)
    if col_lo > col_hi or row_lo > row_hi:
        return np.zeros((0, 2), dtype=np.int64)
    rows, cols = np.mgrid[row_lo:row_hi + 1, col_lo:col_hi + 1]
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.int64)
    location = classify_points(poly, pixels[:, ::-1].astype(np.float64))
    pixels = pixels[location != Location.OUTSIDE]
    if exclude is not None and len(exclude):
        flat = pixels[:, 0] * intr.width + pixels[:, 1]
        excluded = np.asarray(exclude, dtype=np.int64).reshape(-1, 2)
        flat_excluded = excluded[:, 0] * intr.width + excluded[:, 1]
        pixels = pixels[~np.isin(flat, flat_excluded)]
    return pixels


def knn_projected(sites: np.ndarray, queries: np.ndarray, k: int) -> KnnTable:
    """Exact k nearest sites for every query via a kd-tree.

    Distance ties are broken by the smaller site index, including ties that
    straddle the k-th place.

    Raises
    ------
    AlphaShapeError
        If there are fewer than ``k`` sites or a query coincides with a site.
    """
    sites = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise AlphaShapeError(f"k must be at least 1, got {k}")
    if len(sites) < k:
        raise AlphaShapeError(f"need at least k={k} sites, got {len(sites)}")
    if len(queries) == 0:
        return KnnTable(np.zeros((0, k), dtype=np.int64), np.zeros((0, k)))

    tree = cKDTree(sites)
    probe = min(k + 1, len(sites))
    dist, idx = tree.query(queries, k=probe)
    dist = np.asarray(dist).reshape(len(queries), probe)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), probe)

    head = idx[:, :k]
    exact = np.linalg.norm(queries[:, None, :] - sites[head], axis=2)
    ranked = np.lexsort((head, exact), axis=1)
    indices = np.take_along_axis(head, ranked, axis=1)

    # rows whose (k+1)-th neighbour is not strictly farther may hide a smaller index past the cut
    if probe > k:
        tied = dist[:, k] <= dist[:, k - 1] * (1 + 1e-12) + 1e-12
    else:
        tied = np.zeros(len(queries), dtype=bool)
    for row in np.flatnonzero(tied):
        radius = dist[row, k - 1] * (1 + 1e-9) + 1e-9
        candidates = np.asarray(tree.query_ball_point(queries[row], r=radius), dtype=np.int64)
        cand_dist = np.linalg.norm(sites[candidates] - queries[row], axis=1)
        ranked = np.lexsort((candidates, cand_dist))
        indices[row] = candidates[ranked[:k]]

    distances = np.linalg.norm(queries[:, None, :] - sites[indices], axis=2)
    if np.any(distances == 0):
        raise AlphaShapeError("a query point coincides with a site")
    return KnnTable(indices=indices, distances=distances)
