"""Dense constructed feature planes.

A feature plane is a ``(H, W, C)`` numpy array (channel-fastest, row-major).
``build_dense_feature`` assembles f_S from a preprocessing frame:

1. ``scatter_embeddings`` writes each occupied pixel's vertex embedding
   (nearest depth wins on collisions),
2. ``idw_fill`` interpolates the alpha-shape interior from the k nearest
   occupied pixels with weights ``1/d``,
3. ``background_fill`` writes e_b everywhere else.

All three steps are linear in ``(e, e_b)``; ``dense_feature_backward``
applies the transpose of that map to a plane-shaped gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .alphashape import KnnTable
from .utils.binary_io import BinaryReader, BinaryWriter
from .utils.logger import get_logger
from .utils.validators import is_finite_array

if TYPE_CHECKING:
    from .cache_manager import PreprocessFrame
    from .geometry import CameraPose, Intrinsics, TriMesh

logger = get_logger(__name__)

FeaturePlane = np.ndarray

PLANE_MAGIC = b"FPLN"
EMBEDDINGS_MAGIC = b"VEMB"
FORMAT_VERSION = 1


class FeatureMapError(ValueError):
    """Raised for shape mismatches and invalid interpolation inputs."""
    pass


@dataclass
class VertexEmbeddings:
    """Learnable per-vertex embeddings ``e`` (n(V), D) and background ``e_b`` (D,)."""

    e: np.ndarray
    e_b: np.ndarray

    def __post_init__(self) -> None:
        if self.e.ndim != 2:
            raise FeatureMapError(f"embeddings must be 2-D, got shape {self.e.shape}")
        if self.e_b.shape != (self.e.shape[1],):
            raise FeatureMapError(f"background feature must have shape ({self.e.shape[1]},), got {self.e_b.shape}")
        if not (is_finite_array(self.e) and is_finite_array(self.e_b)):
            raise FeatureMapError("embeddings contain non-finite values")

    @property
    def vertex_count(self) -> int:
        return self.e.shape[0]

    @property
    def dim(self) -> int:
        return self.e.shape[1]


@dataclass(frozen=True)
class OccupiedSites:
    """Occupied pixels (the projected vertex set U_S) in row-major order."""

    pixels: np.ndarray
    vertices: np.ndarray

    def coords(self) -> np.ndarray:
        """Sites as ``(x, y)`` = ``(col, row)`` float coordinates."""
        return self.pixels[:, ::-1].astype(np.float64)


def new_plane(height: int, width: int, channels: int, dtype=np.float64) -> FeaturePlane:
    return np.zeros((height, width, channels), dtype=dtype)


def resolve_sites(pixels: np.ndarray, depths: np.ndarray, vertex_ids: np.ndarray, width: int) -> OccupiedSites:
    """Z-buffer the projected vertices: one vertex per pixel, nearest depth wins.

    Exact depth ties go to the smaller vertex index. Sites come out sorted
    by flat pixel index.
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    flat = pixels[:, 0] * width + pixels[:, 1]
    order = np.lexsort((vertex_ids, np.asarray(depths, dtype=np.float64), flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    return OccupiedSites(pixels=pixels[winners], vertices=vertex_ids[winners])


def scatter_embeddings(
    plane: FeaturePlane,
    pixels: np.ndarray,
    depths: np.ndarray,
    vertex_ids: np.ndarray,
    emb: VertexEmbeddings,
) -> OccupiedSites:
    """Write ``e[v]`` at the pixel of every winning vertex.

    Returns
    -------
    OccupiedSites
        The occupied pixels and the vertex stored at each.
    """
    if plane.shape[2] != emb.dim:
        raise FeatureMapError(f"plane has {plane.shape[2]} channels, embeddings have {emb.dim}")
    height, width = plane.shape[:2]
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) and (pixels.min() < 0 or pixels[:, 0].max() >= height or pixels[:, 1].max() >= width):
        raise FeatureMapError("projected pixel outside the plane")
    sites = resolve_sites(pixels, depths, vertex_ids, width)
    plane[sites.pixels[:, 0], sites.pixels[:, 1]] = emb.e[sites.vertices]
    return sites


def idw_weights(distances: np.ndarray) -> np.ndarray:
    """Normalized inverse-distance weights, row-wise, in float64."""
    distances = np.asarray(distances, dtype=np.float64)
    if np.any(distances <= 0):
        raise FeatureMapError("zero distance in IDW table; projected pixels must be excluded from the interior")
    inverse = 1.0 / distances
    return inverse / inverse.sum(axis=1, keepdims=True)


def idw_fill(
    plane: FeaturePlane,
    interior: np.ndarray,
    knn: KnnTable,
    emb: VertexEmbeddings,
    vertex_of_site: np.ndarray,
) -> FeaturePlane:
    """Inverse-distance-weighted interpolation at the interior pixels.

    ``plane[p] = sum_i (1/d_i) e[v_i] / sum_i (1/d_i)`` over the k nearest
    occupied pixels, accumulated in float64.
    """
    interior = np.asarray(interior, dtype=np.int64).reshape(-1, 2)
    if len(interior) != len(knn.indices):
        raise FeatureMapError(f"k-NN table has {len(knn.indices)} rows for {len(interior)} interior pixels")
    if len(interior) == 0:
        return plane
    weights = idw_weights(knn.distances)
    neighbours = emb.e[np.asarray(vertex_of_site)[knn.indices]].astype(np.float64)
    values = np.einsum("qk,qkd->qd", weights, neighbours)
    plane[interior[:, 0], interior[:, 1]] = values
    return plane


def background_fill(plane: FeaturePlane, mask: np.ndarray, e_b: np.ndarray) -> FeaturePlane:
    """Assign ``e_b`` to every pixel where ``mask`` (H, W) is True."""
    plane[mask] = e_b
    return plane


def background_mask(height: int, width: int, sites: OccupiedSites, interior: np.ndarray) -> np.ndarray:
    """Pixels that are neither occupied nor interior."""
    mask = np.ones((height, width), dtype=bool)
    mask[sites.pixels[:, 0], sites.pixels[:, 1]] = False
    interior = np.asarray(interior, dtype=np.int64).reshape(-1, 2)
    mask[interior[:, 0], interior[:, 1]] = False
    return mask


def _check_frame(frame: "PreprocessFrame", mesh: Optional["TriMesh"], pose: Optional["CameraPose"], intr: Optional["Intrinsics"], alpha: Optional[float]) -> None:
    if mesh is None or pose is None or intr is None or alpha is None:
        return
    from .cache_manager import fingerprint_for

    expected = fingerprint_for(mesh, pose, intr, alpha, frame.knn_indices.shape[1])
    if expected != frame.fingerprint:
        raise FeatureMapError(
            f"cache frame for pose {frame.pose_index} was built for different inputs "
            f"(fingerprint {frame.fingerprint:016x}, expected {expected:016x})"
        )


def build_dense_feature(
    emb: VertexEmbeddings,
    frame: "PreprocessFrame",
    mesh: Optional["TriMesh"] = None,
    pose: Optional["CameraPose"] = None,
    intr: Optional["Intrinsics"] = None,
    alpha: Optional[float] = None,
    dtype=np.float64,
) -> FeaturePlane:
    """Assemble f_S for one frame.

    When ``mesh``, ``pose``, ``intr`` and ``alpha`` are all given the frame's
    fingerprint is verified against them first.
    """
    _check_frame(frame, mesh, pose, intr, alpha)
    if emb.vertex_count != frame.vertex_count:
        raise FeatureMapError(
            f"embeddings cover {emb.vertex_count} vertices, frame was built for {frame.vertex_count}"
        )
    plane = new_plane(frame.height, frame.width, emb.dim, dtype=dtype)
    sites = scatter_embeddings(plane, frame.pixels, frame.depths, frame.vertex_ids, emb)
    idw_fill(plane, frame.interior, frame.knn, emb, sites.vertices)
    background_fill(plane, background_mask(frame.height, frame.width, sites, frame.interior), emb.e_b)
    return plane


def dense_feature_backward(grad_plane: np.ndarray, frame: "PreprocessFrame", vertex_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Transpose of ``build_dense_feature`` applied to ``grad_plane``.

    Returns
    -------
    tuple
        ``(grad_e, grad_e_b)`` with shapes (n(V), D) and (D,).
    """
    grad_plane = np.asarray(grad_plane, dtype=np.float64)
    channels = grad_plane.shape[2]
    grad_e = np.zeros((vertex_count, channels))
    sites = frame.sites
    np.add.at(grad_e, sites.vertices, grad_plane[sites.pixels[:, 0], sites.pixels[:, 1]])

    interior = frame.interior
    if len(interior):
        weights = idw_weights(frame.knn.distances)
        upstream = grad_plane[interior[:, 0], interior[:, 1]]
        contributions = weights[:, :, None] * upstream[:, None, :]
        np.add.at(grad_e, sites.vertices[frame.knn.indices].ravel(), contributions.reshape(-1, channels))

    mask = background_mask(frame.height, frame.width, sites, interior)
    grad_e_b = grad_plane[mask].sum(axis=0)
    return grad_e, grad_e_b


def save_plane(path: str, plane: FeaturePlane) -> None:
    """Write a plane as FPLN (float32 little-endian, channel-fastest)."""
    if plane.ndim != 3:
        raise FeatureMapError(f"feature plane must be 3-D, got shape {plane.shape}")
    if not is_finite_array(plane):
        raise FeatureMapError("refusing to save a plane with non-finite values")
    writer = BinaryWriter()
    writer.header(PLANE_MAGIC, FORMAT_VERSION)
    for size in plane.shape:
        writer.u32(size)
    writer.array(plane, "<f4")
    writer.save(path)


def load_plane(path: str) -> FeaturePlane:
    """Read an FPLN file into a float32 (H, W, C) array."""
    reader = BinaryReader.from_file(path)
    reader.header(PLANE_MAGIC, FORMAT_VERSION)
    height, width, channels = reader.u32(), reader.u32(), reader.u32()
    values = reader.array(height * width * channels, "<f4").reshape(height, width, channels)
    reader.expect_end()
    return values


def write_embeddings(writer: BinaryWriter, emb: VertexEmbeddings) -> None:
    writer.header(EMBEDDINGS_MAGIC, FORMAT_VERSION)
    writer.u32(emb.vertex_count)
    writer.u32(emb.dim)
    writer.array(emb.e, "<f4")
    writer.array(emb.e_b, "<f4")


def read_embeddings(reader: BinaryReader) -> VertexEmbeddings:
    reader.header(EMBEDDINGS_MAGIC, FORMAT_VERSION)
    count, dim = reader.u32(), reader.u32()
    e = reader.array(count * dim, "<f4").reshape(count, dim).astype(np.float64)
    e_b = reader.array(dim, "<f4").astype(np.float64)
    return VertexEmbeddings(e=e, e_b=e_b)


def save_embeddings(path: str, emb: VertexEmbeddings) -> None:
    writer = BinaryWriter()
    write_embeddings(writer, emb)
    writer.save(path)


def load_embeddings(path: str) -> VertexEmbeddings:
    reader = BinaryReader.from_file(path)
    emb = read_embeddings(reader)
    reader.expect_end()
    return emb
