"""Preprocessing cache for register-adapt.

For every camera pose the cache stores what the register needs to build
f_S without touching geometry again: the visible-vertex set, the projected
pixels and depths of visible vertices that land on the grid, the pixels
inside the alpha contour (minus occupied ones) and their k-NN table.

File layout (``PCCH`` version 1, little-endian)::

    magic "PCCH" | u32 version | u32 H | u32 W | u32 k | f64 alpha | f64 fov_deg
    u32 vertex_count | u32 frame_count
    per frame:
        u32 pose_index | u64 fingerprint
        u32 n_visible  | u32[n_visible] visible
        u32 n_proj     | u32[n_proj] vertex_ids | u32[n_proj] rows | u32[n_proj] cols | f64[n_proj] depths
        u32 n_interior | u32[n_interior] rows | u32[n_interior] cols
        u32[n_interior*k] knn site indices | f64[n_interior*k] knn distances
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .alphashape import AlphaShapeError, KnnTable, alpha_shape, interior_points, knn_projected
from .featuremap import OccupiedSites, resolve_sites
from .geometry import CameraPose, GeometryError, Intrinsics, TriMesh, perspective_project, round_to_grid_many
from .utils.binary_io import BinaryReader, BinaryWriter
from .utils.fingerprint import frame_fingerprint
from .utils.logger import get_logger
from .visibility import Bvh, VisibilityError, build_bvh, require_outside, visible_vertices

CACHE_MAGIC = b"PCCH"
CACHE_VERSION = 1


class CacheError(ValueError):
    """Raised when a frame cannot be built or a cache does not match its inputs."""
    pass


@dataclass(frozen=True)
class PreprocessFrame:
    """Precomputed geometry for one pose."""

    pose_index: int
    fingerprint: int
    height: int
    width: int
    vertex_count: int
    visible: np.ndarray
    vertex_ids: np.ndarray
    pixels: np.ndarray
    depths: np.ndarray
    interior: np.ndarray
    knn_indices: np.ndarray
    knn_distances: np.ndarray

    @property
    def knn(self) -> KnnTable:
        return KnnTable(indices=self.knn_indices, distances=self.knn_distances)

    @cached_property
    def sites(self) -> OccupiedSites:
        return resolve_sites(self.pixels, self.depths, self.vertex_ids, self.width)


@dataclass
class PreprocessCache:
    """All frames of one preprocessing run plus the parameters they share."""

    height: int
    width: int
    k: int
    alpha: float
    fov_deg: float
    vertex_count: int
    frames: list[PreprocessFrame] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)

    def frame_for_pose(self, pose_index: int) -> PreprocessFrame:
        for frame in self.frames:
            if frame.pose_index == pose_index:
                return frame
        raise CacheError(f"cache has no frame for pose {pose_index}")

    @property
    def pose_indices(self) -> list[int]:
        return [frame.pose_index for frame in self.frames]


def fingerprint_for(mesh: TriMesh, pose: CameraPose, intr: Intrinsics, alpha: float, k: int) -> int:
    return frame_fingerprint(mesh.vertices, mesh.faces, pose.rotation, pose.translation, intr.as_tuple(), alpha, k)


def build_frame(
    mesh: TriMesh,
    pose: CameraPose,
    intr: Intrinsics,
    alpha: float,
    k: int,
    bvh: Optional[Bvh] = None,
    pose_index: int = 0,
) -> PreprocessFrame:
    """Run visibility, projection, alpha shape and k-NN for one pose.

    Raises
    ------
    CacheError
        If the camera is inside the mesh, fewer than 3 visible vertices land
        on the grid, or the alpha shape / k-NN cannot be built.
    """
    logger = get_logger("CacheManager")
    mesh.require_usable()
    try:
        require_outside(mesh, pose)
        visible = visible_vertices(mesh, pose, bvh if bvh is not None else build_bvh(mesh))
    except (GeometryError, VisibilityError) as e:
        raise CacheError(f"pose {pose_index}: {e}")

    coords, depths, in_front = perspective_project(mesh.vertices[visible], pose, intr)
    pixels, on_grid = round_to_grid_many(coords, intr)
    keep = in_front & on_grid
    dropped = len(visible) - int(keep.sum())
    if dropped:
        logger.warning("Pose %d: %d visible vertices fall behind the camera or off the grid", pose_index, dropped)
    vertex_ids = visible[keep]
    pixels = pixels[keep]
    depths = depths[keep]

    sites = resolve_sites(pixels, depths, vertex_ids, intr.width)
    if len(sites.pixels) < 3:
        raise CacheError(f"pose {pose_index}: only {len(sites.pixels)} projected vertices on the grid (need 3)")
    try:
        polygon = alpha_shape(sites.coords(), alpha)
        interior = interior_points(polygon, intr, exclude=sites.pixels)
        knn = knn_projected(sites.coords(), interior[:, ::-1].astype(np.float64), k)
    except AlphaShapeError as e:
        raise CacheError(f"pose {pose_index}: {e}")

    logger.debug(
        "Pose %d: %d visible, %d sites, %d interior pixels",
        pose_index, len(visible), len(sites.pixels), len(interior),
    )
    return PreprocessFrame(
        pose_index=pose_index,
        fingerprint=fingerprint_for(mesh, pose, intr, alpha, k),
        height=intr.height,
        width=intr.width,
        vertex_count=mesh.vertex_count,
        visible=visible,
        vertex_ids=vertex_ids,
        pixels=pixels,
        depths=depths,
        interior=interior,
        knn_indices=knn.indices,
        knn_distances=knn.distances,
    )


def build_cache(
    mesh: TriMesh,
    poses: Sequence[CameraPose],
    intr: Intrinsics,
    alpha: float,
    k: int,
    fov_deg: float,
    workers: int = 1,
) -> PreprocessCache:
    """Build frames for every pose; failures are collected, not raised.

    Frames are processed on a thread pool; results keep pose order.
    """
    logger = get_logger("CacheManager")
    bvh = build_bvh(mesh)

    def attempt(item: tuple[int, CameraPose]):
        index, pose = item
        try:
            return build_frame(mesh, pose, intr, alpha, k, bvh=bvh, pose_index=index)
        except CacheError as e:
            return e

    cache = PreprocessCache(height=intr.height, width=intr.width, k=k, alpha=alpha, fov_deg=fov_deg, vertex_count=mesh.vertex_count)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for index, outcome in enumerate(pool.map(attempt, enumerate(poses))):
            if isinstance(outcome, CacheError):
                cache.errors[index] = str(outcome)
                logger.warning("Skipping pose %d: %s", index, outcome)
            else:
                cache.frames.append(outcome)
    logger.info("Preprocessed %d/%d poses", len(cache.frames), len(poses))
    return cache


def save_cache(path: str, cache: PreprocessCache) -> None:
    writer = BinaryWriter()
    writer.header(CACHE_MAGIC, CACHE_VERSION)
    writer.u32(cache.height)
    writer.u32(cache.width)
    writer.u32(cache.k)
    writer.f64(cache.alpha)
    writer.f64(cache.fov_deg)
    writer.u32(cache.vertex_count)
    writer.u32(len(cache.frames))
    for frame in cache.frames:
        writer.u32(frame.pose_index)
        writer.u64(frame.fingerprint)
        writer.u32(len(frame.visible))
        writer.array(frame.visible, "<u4")
        writer.u32(len(frame.vertex_ids))
        writer.array(frame.vertex_ids, "<u4")
        writer.array(frame.pixels[:, 0], "<u4")
        writer.array(frame.pixels[:, 1], "<u4")
        writer.array(frame.depths, "<f8")
        writer.u32(len(frame.interior))
        writer.array(frame.interior[:, 0], "<u4")
        writer.array(frame.interior[:, 1], "<u4")
        writer.array(frame.knn_indices, "<u4")
        writer.array(frame.knn_distances, "<f8")
    writer.save(path)


def load_cache(path: str) -> PreprocessCache:
    reader = BinaryReader.from_file(path)
    reader.header(CACHE_MAGIC, CACHE_VERSION)
    height, width, k = reader.u32(), reader.u32(), reader.u32()
    alpha, fov_deg = reader.f64(), reader.f64()
    vertex_count, frame_count = reader.u32(), reader.u32()
    cache = PreprocessCache(height=height, width=width, k=k, alpha=alpha, fov_deg=fov_deg, vertex_count=vertex_count)
    for _ in range(frame_count):
        pose_index, fingerprint = reader.u32(), reader.u64()
        visible = reader.array(reader.u32(), "<u4").astype(np.int64)
        n_proj = reader.u32()
        vertex_ids = reader.array(n_proj, "<u4").astype(np.int64)
        rows = reader.array(n_proj, "<u4").astype(np.int64)
        cols = reader.array(n_proj, "<u4").astype(np.int64)
        depths = reader.array(n_proj, "<f8")
        n_interior = reader.u32()
        interior_rows = reader.array(n_interior, "<u4").astype(np.int64)
        interior_cols = reader.array(n_interior, "<u4").astype(np.int64)
        knn_indices = reader.array(n_interior * k, "<u4").astype(np.int64).reshape(n_interior, k)
        knn_distances = reader.array(n_interior * k, "<f8").reshape(n_interior, k)
        cache.frames.append(
            PreprocessFrame(
                pose_index=pose_index,
                fingerprint=fingerprint,
                height=height,
                width=width,
                vertex_count=vertex_count,
                visible=visible,
                vertex_ids=vertex_ids,
                pixels=np.stack([rows, cols], axis=1),
                depths=depths,
                interior=np.stack([interior_rows, interior_cols], axis=1),
                knn_indices=knn_indices,
                knn_distances=knn_distances,
            )
        )
    reader.expect_end()
    return cache


def verify_cache(cache: PreprocessCache, mesh: TriMesh, poses: Sequence[CameraPose], intr: Intrinsics) -> None:
    """Check every frame's fingerprint against the inputs it claims to describe."""
    if cache.vertex_count != mesh.vertex_count:
        raise CacheError(f"cache was built for {cache.vertex_count} vertices, mesh has {mesh.vertex_count}")
    if (cache.height, cache.width) != (intr.height, intr.width):
        raise CacheError(f"cache grid {cache.height}x{cache.width} does not match {intr.height}x{intr.width}")
    for frame in cache.frames:
        if frame.pose_index >= len(poses):
            raise CacheError(f"cache frame refers to pose {frame.pose_index}, only {len(poses)} poses given")
        expected = fingerprint_for(mesh, poses[frame.pose_index], intr, cache.alpha, cache.k)
        if expected != frame.fingerprint:
            raise CacheError(f"fingerprint mismatch for pose {frame.pose_index}")
