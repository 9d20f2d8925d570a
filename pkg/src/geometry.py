"""Mesh and camera primitives for register-adapt.

Conventions
-----------
* Camera frame: +z points into the scene, +x to the right, +y down, so the
  image row grows with +y.
* Continuous image coordinates are ``(x, y)`` = (column-like, row-like).
* Grid pixels are ``PixelCoord(row, col)``, 0-based.
* The principal point sits at ``((W-1)/2, (H-1)/2)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .utils.logger import get_logger
from .utils.validators import is_finite_array, is_rotation_matrix

logger = get_logger(__name__)

DEFAULT_FOV_DEG = 30.0


class GeometryError(ValueError):
    """Raised for invalid meshes, poses or intrinsics."""
    pass


class ObjParseError(GeometryError):
    """Raised when an OBJ file cannot be parsed; carries the 1-based line number."""

    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with float64 vertices (n, 3) and int64 faces (m, 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise GeometryError(f"vertices must have shape (n, 3), got {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise GeometryError(f"faces must have shape (m, 3), got {faces.shape}")
        if not is_finite_array(vertices):
            raise GeometryError("vertices contain non-finite coordinates")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise GeometryError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
                raise GeometryError("every face needs three distinct vertex indices")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """Return the (m, 3, 3) corner coordinates of every face."""
        return self.vertices[self.faces]

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def require_usable(self) -> None:
        """Raise unless the mesh can feed projection and visibility."""
        if self.vertex_count < 3:
            raise GeometryError(f"mesh needs at least 3 vertices, has {self.vertex_count}")
        if self.face_count == 0:
            raise GeometryError("mesh has no faces")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation_matrix(rotation):
            raise GeometryError("rotation must be orthonormal with determinant +1 (tolerance 1e-9)")
        if not is_finite_array(translation):
            raise GeometryError("translation contains non-finite values")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels for a ``width`` x ``height`` grid."""

    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"grid size must be positive, got {self.width}x{self.height}")
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.principal_x < self.width and 0 <= self.principal_y < self.height):
            raise GeometryError("principal point must lie inside the grid")

    def as_tuple(self) -> tuple[float, float, float, float, int, int]:
        return (self.focal_x, self.focal_y, self.principal_x, self.principal_y, self.width, self.height)


class PixelCoord(NamedTuple):
    row: int
    col: int


def make_intrinsics(width: int, height: int, fov_deg: float = DEFAULT_FOV_DEG) -> Intrinsics:
    """Build square-pixel intrinsics from a horizontal field of view.

    ``focal = (width / 2) / tan(fov / 2)``; the principal point is the
    centre of the pixel lattice.
    """
    if not 0 < fov_deg < 180:
        raise GeometryError(f"fov_deg must be in (0, 180), got {fov_deg}")
    focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Intrinsics(
        focal_x=focal,
        focal_y=focal,
        principal_x=(width - 1) / 2.0,
        principal_y=(height - 1) / 2.0,
        width=int(width),
        height=int(height),
    )


def perspective_project(
    points: np.ndarray, pose: CameraPose, intr: Intrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points through a pinhole camera.

    Parameters
    ----------
    points: np.ndarray
        World points, shape (n, 3).
    pose: CameraPose
        World-to-camera transform.
    intr: Intrinsics
        Camera intrinsics.

    Returns
    -------
    coords: np.ndarray
        (n, 2) continuous ``(x, y)`` image coordinates; NaN where invalid.
    depths: np.ndarray
        (n,) camera-space z.
    valid: np.ndarray
        (n,) bool; False marks points with non-positive depth.
    """
    cam = pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depths = cam[:, 2].copy()
    valid = depths > 0
    coords = np.full((len(cam), 2), np.nan)
    z = depths[valid]
    coords[valid, 0] = intr.focal_x * cam[valid, 0] / z + intr.principal_x
    coords[valid, 1] = intr.focal_y * cam[valid, 1] / z + intr.principal_y
    return coords, depths, valid


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def round_to_grid_many(coords: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``round_to_grid``.

    Returns
    -------
    pixels: np.ndarray
        (n, 2) int64 ``(row, col)``; rows for invalid entries are -1.
    inside: np.ndarray
        (n,) bool mask of coordinates that land on the grid.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    finite = np.all(np.isfinite(coords), axis=1)
    rounded = np.zeros_like(coords)
    rounded[finite] = _round_half_away(coords[finite])
    cols, rows = rounded[:, 0], rounded[:, 1]
    inside = finite & (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)
    pixels = np.full((len(coords), 2), -1, dtype=np.int64)
    pixels[inside, 0] = rows[inside].astype(np.int64)
    pixels[inside, 1] = cols[inside].astype(np.int64)
    return pixels, inside


def round_to_grid(coord: Sequence[float], intr: Intrinsics) -> Optional[PixelCoord]:
    """Round a continuous ``(x, y)`` coordinate to the nearest pixel.

    Ties round half away from zero. Returns None when the rounded pixel
    falls outside the grid.
    """
    pixels, inside = round_to_grid_many(np.asarray(coord, dtype=np.float64).reshape(1, 2), intr)
    if not inside[0]:
        return None
    return PixelCoord(int(pixels[0, 0]), int(pixels[0, 1]))


def look_at(eye: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0), up: Sequence[float] = (0.0, 1.0, 0.0)) -> CameraPose:
    """Pose of a camera at ``eye`` looking at ``target``.

    World ``up`` maps to image-up (negative row direction).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise GeometryError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise GeometryError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraPose(rotation=rotation, translation=-rotation @ eye)


def ring_poses(
    count: int,
    distance: float = 4.0,
    spread_deg: float = 60.0,
    elevation_deg: float = 10.0,
) -> list[CameraPose]:
    """Cameras on a horizontal arc around the origin, all looking at it.

    Pose 0 faces the mesh from +z; the others spread symmetrically over
    ``spread_deg`` of azimuth with alternating elevation.
    """
    if count < 1:
        raise GeometryError("count must be at least 1")
    poses = []
    for index in range(count):
        if index == 0:
            azimuth = 0.0
        else:
            step = spread_deg / max(count - 1, 1)
            side = 1.0 if index % 2 else -1.0
            azimuth = side * step * ((index + 1) // 2)
        elevation = elevation_deg * (1 if index % 2 else -1) if index else 0.0
        az, el = math.radians(azimuth), math.radians(elevation)
        eye = distance * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
        poses.append(look_at(eye))
    return poses


def load_obj(path: str) -> TriMesh:
    """Parse the ``v``/``f`` subset of Wavefront OBJ.

    Polygon faces are fan-triangulated; ``#`` comments and blank lines are
    skipped. Face entries may carry ``/vt/vn`` suffixes, which are ignored.

    Raises
    ------
    ObjParseError
        On malformed records or out-of-range indices, naming the line.
    """
    vertices: list[tuple[float, float, float]] = []
    raw_faces: list[tuple[int, list[int]]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            parts = stripped.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, line_number, "vertex record needs 3 coordinates")
                try:
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise ObjParseError(path, line_number, f"invalid vertex coordinate in {stripped!r}")
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, line_number, "face record needs at least 3 vertices")
                try:
                    indices = [int(token.split("/")[0]) for token in parts[1:]]
                except ValueError:
                    raise ObjParseError(path, line_number, f"invalid face index in {stripped!r}")
                raw_faces.append((line_number, indices))
            else:
                raise ObjParseError(path, line_number, f"unsupported record {tag!r}")

    faces: list[tuple[int, int, int]] = []
    for line_number, indices in raw_faces:
        resolved = []
        for index in indices:
            if index < 1 or index > len(vertices):
                raise ObjParseError(path, line_number, f"vertex index {index} out of range 1..{len(vertices)}")
            resolved.append(index - 1)
        if len(set(resolved)) != len(resolved):
            raise ObjParseError(path, line_number, "face repeats a vertex")
        for j in range(1, len(resolved) - 1):
            faces.append((resolved[0], resolved[j], resolved[j + 1]))

    mesh = TriMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    logger.debug("Loaded %s: %d vertices, %d faces", path, mesh.vertex_count, mesh.face_count)
    return mesh


def write_obj(path: str, mesh: TriMesh) -> None:
    """Write ``mesh`` as ``v``/``f`` records with 1-based indices."""
    with open(path, "w", encoding="utf-8") as handle:
        for x, y, z in mesh.vertices:
            handle.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces:
            handle.write(f"f {int(a) + 1} {int(b) + 1} {int(c) + 1}\n")


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Unit icosahedron refined by midpoint subdivision, projected to the sphere.

    Vertex counts: 12, 42, 162, 642, ... for 0, 1, 2, 3 subdivisions.
    """
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    points = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        midpoints: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                mid = points[a] + points[b]
                points.append(mid / np.linalg.norm(mid))
                midpoints[key] = len(points) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined

    return TriMesh(np.stack(points) * radius, np.asarray(faces, dtype=np.int64))


def load_poses(path: str) -> tuple[list[CameraPose], dict]:
    """Read a JSON pose document.

    Format::

        {"fov_deg": 30, "width": 296, "height": 296,
         "poses": [{"rotation": [9 numbers, row-major], "translation": [3 numbers]}, ...]}

    The camera keys are optional.

    Returns
    -------
    tuple
        The poses and a dict with whichever camera keys were present.
    """
    with open(path, "r", encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as e:
            raise GeometryError(f"{path}: invalid pose document: {e}")
    entries = document.get("poses") if isinstance(document, dict) else None
    if not entries:
        raise GeometryError(f"{path}: pose document lists no poses")
    poses = []
    for index, entry in enumerate(entries):
        rotation = entry.get("rotation")
        translation = entry.get("translation")
        if rotation is None or len(rotation) != 9 or translation is None or len(translation) != 3:
            raise GeometryError(f"{path}: pose {index} needs 9 rotation and 3 translation numbers")
        try:
            poses.append(CameraPose(np.asarray(rotation, dtype=np.float64).reshape(3, 3), np.asarray(translation, dtype=np.float64)))
        except GeometryError as e:
            raise GeometryError(f"{path}: pose {index}: {e}")
    camera = {key: document[key] for key in ("fov_deg", "width", "height") if key in document}
    return poses, camera


def save_poses(path: str, poses: Sequence[CameraPose], fov_deg: Optional[float] = None, width: Optional[int] = None, height: Optional[int] = None) -> None:
    """Write poses in the JSON pose document format."""
    document: dict = {}
    if fov_deg is not None:
        document["fov_deg"] = float(fov_deg)
    if width is not None:
        document["width"] = int(width)
    if height is not None:
        document["height"] = int(height)
    document["poses"] = [
        {"rotation": pose.rotation.reshape(-1).tolist(), "translation": pose.translation.tolist()}
        for pose in poses
    ]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2)
