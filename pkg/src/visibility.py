"""Ray-cast vertex visibility.

A vertex is visible when the segment from the camera origin to it crosses
no triangle before ``|v - origin| - eps_vis``. The bounding volume
hierarchy is stored as flat arrays and traversed for a whole packet of
rays at a time; ``brute_force_visible`` tests every ray against every
triangle and serves as the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, GeometryError, TriMesh
from .utils.logger import get_logger
from .utils.validators import is_unit_vector

logger = get_logger(__name__)

LEAF_SIZE = 4
EPS_RAY = 1e-7
EPS_VIS_SCALE = 1e-4
_PARALLEL_EPS = 1e-12
# barycentric slack: rays through an edge shared by two triangles hit both
_BARY_EPS = 1e-9
_BOX_PAD = 1e-9
_PARITY_DIRECTION = np.array([0.2672612419124244, 0.5345224838248488, 0.8017837257372732])
_CHUNK = 1 << 20


class VisibilityError(ValueError):
    """Raised for invalid ray queries or BVH inputs."""
    pass


@dataclass(frozen=True)
class Bvh:
    """Flat axis-aligned bounding volume hierarchy over mesh triangles.

    Node ``i`` has bounds ``box_min[i]``/``box_max[i]``. Inner nodes have
    children ``left[i]`` and ``right[i]``; leaves have ``left[i] == -1`` and
    own ``order[start[i]:start[i] + count[i]]`` (triangle indices).
    """

    triangles: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.left)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_triangles(self, node: int) -> np.ndarray:
        return self.order[self.start[node]:self.start[node] + self.count[node]]


def build_bvh(mesh: TriMesh) -> Bvh:
    """Build a BVH by median split on the longest centroid axis.

    Construction is deterministic: centroids are ordered with a stable sort
    keyed on (coordinate, triangle index).
    """
    if mesh.face_count == 0:
        raise VisibilityError("cannot build a BVH for an empty mesh")
    triangles = mesh.triangles()
    # boxes are padded so round-off in the slab test never prunes a true hit
    pad = _BOX_PAD * max(1.0, mesh.bbox_diagonal())
    tri_min = triangles.min(axis=1) - pad
    tri_max = triangles.max(axis=1) + pad
    centroids = triangles.mean(axis=1)

    box_min, box_max, left, right, start, count = [], [], [], [], [], []
    order: list[int] = []

    def new_node(members: np.ndarray) -> int:
        box_min.append(tri_min[members].min(axis=0))
        box_max.append(tri_max[members].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root_members = np.arange(mesh.face_count)
    stack = [(new_node(root_members), root_members)]
    while stack:
        node, members = stack.pop()
        if len(members) <= LEAF_SIZE:
            start[node] = len(order)
            count[node] = len(members)
            order.extend(int(m) for m in members)
            continue
        spread = centroids[members].max(axis=0) - centroids[members].min(axis=0)
        axis = int(np.argmax(spread))
        ranked = members[np.lexsort((members, centroids[members, axis]))]
        half = len(ranked) // 2
        lower, upper = ranked[:half], ranked[half:]
        left[node] = new_node(lower)
        right[node] = new_node(upper)
        # right pushed first so the left subtree is laid out first
        stack.append((right[node], upper))
        stack.append((left[node], lower))

    return Bvh(
        triangles=triangles,
        box_min=np.asarray(box_min),
        box_max=np.asarray(box_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        order=np.asarray(order, dtype=np.int64),
    )


def _moller_trumbore(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Ray/triangle distances for every (ray, triangle) pair.

    Returns an (r, t) array of hit distances with ``inf`` for misses and
    for hits at ``t <= EPS_RAY``.
    """
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    # explicit elementwise products keep results identical for any packet shape
    p = np.cross(dirs[:, None, :], e2[None, :, :])
    det = (e1[None, :, :] * p).sum(axis=2)
    ok = np.abs(det) > _PARALLEL_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - v0[None, :, :]
    u = (s * p).sum(axis=2) * inv
    q = np.cross(s, e1[None, :, :])
    v = (dirs[:, None, :] * q).sum(axis=2) * inv
    t = (e2[None, :, :] * q).sum(axis=2) * inv
    hit = ok & (u >= -_BARY_EPS) & (v >= -_BARY_EPS) & (u + v <= 1.0 + _BARY_EPS) & (t > EPS_RAY)
    return np.where(hit, t, np.inf)


def _plane_crossings(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Ray/triangle distances by plane intersection and area coordinates.

    Same contract as :func:`_moller_trumbore` but computed independently;
    the exhaustive reference queries use it.
    """
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    normal = np.cross(v1 - v0, v2 - v0)
    area2 = (normal * normal).sum(axis=1)
    denom = (dirs[:, None, :] * normal[None, :, :]).sum(axis=2)
    ok = np.abs(denom) > _PARALLEL_EPS
    numer = ((v0[None, :, :] - origins[:, None, :]) * normal[None, :, :]).sum(axis=2)
    t = numer / np.where(ok, denom, 1.0)
    point = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    inside = ok & (t > EPS_RAY)
    for a, b in ((v1, v2), (v2, v0), (v0, v1)):
        # signed area of (a, b, point) over the triangle area: the weight of the opposite corner
        weight = (np.cross(b - a, point - a[None, :, :]) * normal[None, :, :]).sum(axis=2) / area2
        inside &= weight >= -_BARY_EPS
    return np.where(inside, t, np.inf)


def _slab_test(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray, t_max: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # 0 * inf on axis-parallel rays: treat the slab as unbounded when the origin is inside it
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    return (near <= far) & (far >= 0.0) & (near <= t_max)


def _traverse(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, t_max: np.ndarray, any_hit: bool) -> tuple[np.ndarray, np.ndarray]:
    """Packet traversal returning (best_t, best_triangle) per ray.

    With ``any_hit`` rays stop at their first accepted hit below ``t_max``
    and the reported triangle is not necessarily the nearest.
    """
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    limit = t_max.astype(np.float64).copy()
    stack = [(0, np.arange(n))]
    while stack:
        node, rays = stack.pop()
        if any_hit:
            rays = rays[best_tri[rays] < 0]
        if rays.size == 0:
            continue
        keep = _slab_test(origins[rays], dirs[rays], bvh.box_min[node], bvh.box_max[node], limit[rays])
        rays = rays[keep]
        if rays.size == 0:
            continue
        if not bvh.is_leaf(node):
            stack.append((int(bvh.right[node]), rays))
            stack.append((int(bvh.left[node]), rays))
            continue
        members = bvh.leaf_triangles(node)
        dist = _moller_trumbore(origins[rays], dirs[rays], bvh.triangles[members])
        if any_hit:
            dist[dist >= limit[rays, None]] = np.inf
        else:
            # equal distances stay eligible for the index tie-break
            dist[dist > limit[rays, None]] = np.inf
        for column, tri in enumerate(members):
            t = dist[:, column]
            better = (t < best_t[rays]) | ((t == best_t[rays]) & (t < np.inf) & (tri < best_tri[rays]))
            chosen = rays[better]
            best_t[chosen] = t[better]
            best_tri[chosen] = tri
        if not any_hit:
            limit[rays] = np.minimum(limit[rays], best_t[rays])
    return best_t, best_tri


def ray_first_hit(bvh: Bvh, origin: np.ndarray, direction: np.ndarray) -> tuple[int, float] | None:
    """Nearest triangle hit by a ray, or None on a miss.

    Ties on distance resolve to the smaller triangle index.
    """
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if not is_unit_vector(direction):
        raise VisibilityError(f"ray direction must have unit norm, got norm {np.linalg.norm(direction)}")
    origins = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    best_t, best_tri = _traverse(bvh, origins, direction.reshape(1, 3), np.array([np.inf]), any_hit=False)
    if best_tri[0] < 0:
        return None
    return int(best_tri[0]), float(best_t[0])


def brute_force_first_hit(triangles: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> tuple[int, float] | None:
    """Exhaustive counterpart of :func:`ray_first_hit`."""
    dist = _plane_crossings(np.asarray(origin, dtype=np.float64).reshape(1, 3), np.asarray(direction, dtype=np.float64).reshape(1, 3), triangles)[0]
    if not np.isfinite(dist).any():
        return None
    best = float(dist.min())
    return int(np.flatnonzero(dist == best)[0]), best


def _vertex_segments(mesh: TriMesh, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    origin = pose.camera_center
    offsets = mesh.vertices - origin
    lengths = np.linalg.norm(offsets, axis=1)
    if np.any(lengths == 0):
        raise VisibilityError("camera origin coincides with a mesh vertex")
    dirs = offsets / lengths[:, None]
    limits = lengths - EPS_VIS_SCALE * mesh.bbox_diagonal()
    origins = np.broadcast_to(origin, dirs.shape).copy()
    return origins, dirs, limits, lengths


def visible_vertices(mesh: TriMesh, pose: CameraPose, bvh: Bvh) -> np.ndarray:
    """Indices of vertices with an unobstructed segment to the camera origin.

    Returns
    -------
    np.ndarray
        Strictly increasing int64 vertex indices (the VisibleSet).
    """
    mesh.require_usable()
    origins, dirs, limits, _ = _vertex_segments(mesh, pose)
    _, hit_tri = _traverse(bvh, origins, dirs, limits, any_hit=True)
    return np.flatnonzero(hit_tri < 0).astype(np.int64)


def brute_force_visible(mesh: TriMesh, pose: CameraPose) -> np.ndarray:
    """Reference visibility by testing every segment against every triangle."""
    mesh.require_usable()
    origins, dirs, limits, _ = _vertex_segments(mesh, pose)
    triangles = mesh.triangles()
    occluded = np.zeros(len(dirs), dtype=bool)
    rows = max(1, (_CHUNK // 8) // max(len(triangles), 1))
    for begin in range(0, len(dirs), rows):
        end = begin + rows
        dist = _plane_crossings(origins[begin:end], dirs[begin:end], triangles)
        occluded[begin:end] = np.any(dist < limits[begin:end, None], axis=1)
    return np.flatnonzero(~occluded).astype(np.int64)


def camera_inside(mesh: TriMesh, origin: np.ndarray) -> bool:
    """Parity test: an odd number of crossings along a fixed ray means inside.

    Only meaningful for closed meshes; open surfaces normally give an even
    (often zero) count from outside.
    """
    dist = _moller_trumbore(np.asarray(origin, dtype=np.float64).reshape(1, 3), _PARITY_DIRECTION.reshape(1, 3), mesh.triangles())[0]
    crossings = int(np.isfinite(dist).sum())
    return crossings % 2 == 1


def require_outside(mesh: TriMesh, pose: CameraPose) -> None:
    """Raise ``GeometryError`` if the camera origin lies inside a closed mesh."""
    if camera_inside(mesh, pose.camera_center):
        raise GeometryError("camera origin lies inside the mesh")
