"""Synthetic dense target features.

Stands in for a pretrained image feature extractor. Each channel ``c`` is a
geometry-locked sinusoid ``sin(omega_c <n_c, x(p)> + phi_c)`` where ``x(p)``
is the 3D surface position seen at pixel ``p``: the projected vertex on
occupied pixels and the IDW blend of neighbouring vertex positions inside the
contour. Pixels outside the contour hold a constant.

Because the targets depend only on geometry and pose, the same vertex
produces the same feature in every view, which the register can learn.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .cache_manager import PreprocessCache, PreprocessFrame
from .featuremap import FeaturePlane, VertexEmbeddings, background_mask, build_dense_feature, save_plane
from .geometry import TriMesh
from .utils.logger import get_logger

logger = get_logger(__name__)

OMEGA_RANGE = (1.0, 4.0)


@dataclass(frozen=True)
class SynthParams:
    omega: np.ndarray
    normals: np.ndarray
    phase: np.ndarray

    @property
    def channels(self) -> int:
        return len(self.omega)


def draw_synth_params(channels: int, seed: int) -> SynthParams:
    """Frequencies in [1, 4], unit directions and phases in [0, 2 pi) from ``seed``."""
    rng = np.random.default_rng(seed)
    omega = rng.uniform(*OMEGA_RANGE, size=channels)
    normals = rng.normal(size=(channels, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    return SynthParams(omega=omega, normals=normals, phase=phase)


def position_plane(frame: PreprocessFrame, mesh: TriMesh) -> FeaturePlane:
    """3D position per pixel, built with the same scatter/IDW path as f_S."""
    positions = VertexEmbeddings(e=np.asarray(mesh.vertices, dtype=np.float64), e_b=np.zeros(3))
    return build_dense_feature(positions, frame)


def synth_plane(frame: PreprocessFrame, mesh: TriMesh, params: SynthParams, background: float = 0.0) -> FeaturePlane:
    positions = position_plane(frame, mesh)
    plane = np.sin(params.omega * (positions @ params.normals.T) + params.phase)
    mask = background_mask(frame.height, frame.width, frame.sites, frame.interior)
    plane[mask] = background
    return plane


def feature_path(directory: str, pose_index: int) -> str:
    return os.path.join(directory, f"pose_{pose_index:04d}.fpln")


def generate_features(
    cache: PreprocessCache,
    mesh: TriMesh,
    channels: int,
    seed: int,
    out_dir: str,
    background: float = 0.0,
) -> list[str]:
    """Write one FPLN plane per cached pose; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    params = draw_synth_params(channels, seed)
    paths = []
    for frame in cache.frames:
        path = feature_path(out_dir, frame.pose_index)
        save_plane(path, synth_plane(frame, mesh, params, background))
        paths.append(path)
    logger.info("Wrote %d synthetic feature planes (%d channels, seed %d) to %s", len(paths), channels, seed, out_dir)
    return paths
