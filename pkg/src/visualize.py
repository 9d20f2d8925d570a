"""Colormapped images of feature planes.

The ``dino`` and ``register`` modes project every pixel's C-dimensional
feature onto one channel-wise PCA component, standardize the result and clip
it to +-3 sigma (``dino``) or +-1 sigma (``register``). The ``norm`` and
``register-norm`` modes show the per-pixel L2 norm, standardized and clipped
to +-3 sigma and +-1 sigma respectively. Values
are mapped onto a 256-level blue-white-red colormap and written as binary PPM.
"""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image
from sklearn.decomposition import PCA

from .featuremap import FeaturePlane, load_plane
from .utils.logger import get_logger

logger = get_logger(__name__)

COLORMAP = "bwr"
COLOR_LEVELS = 256
CLIP_SIGMA = {"dino": 3.0, "register": 1.0, "norm": 3.0, "register-norm": 1.0}
NORM_MODES = ("norm", "register-norm")


class VisualizationError(ValueError):
    """Raised for zero-variance planes, bad component indices and unknown modes."""
    pass


def pca_projection(plane: FeaturePlane, component: int) -> np.ndarray:
    """Scores of every pixel on one principal component, shaped (H, W)."""
    if plane.ndim != 3:
        raise VisualizationError(f"feature plane must be 3-D, got shape {plane.shape}")
    height, width, channels = plane.shape
    if not 0 <= component < channels:
        raise VisualizationError(f"component {component} requested from a plane with {channels} channels")
    samples = plane.reshape(-1, channels).astype(np.float64)
    if component >= len(samples):
        raise VisualizationError(f"component {component} requested from only {len(samples)} pixels")
    if not np.any(samples.var(axis=0) > 0):
        raise VisualizationError("feature plane has zero variance")
    scores = PCA(n_components=component + 1, svd_solver="full").fit_transform(samples)
    return scores[:, component].reshape(height, width)


def norm_map(plane: FeaturePlane) -> np.ndarray:
    return np.linalg.norm(np.asarray(plane, dtype=np.float64), axis=2)


def standardize(values: np.ndarray) -> np.ndarray:
    """Zero mean, unit (population) variance."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if not std > 0:
        raise VisualizationError("projection has zero variance")
    return (values - values.mean()) / std


def color_table() -> np.ndarray:
    """(256, 3) uint8 RGB entries of the blue-white-red map."""
    rgba = colormaps[COLORMAP].resampled(COLOR_LEVELS)(np.arange(COLOR_LEVELS))
    return np.round(rgba[:, :3] * 255).astype(np.uint8)


def to_rgb(values: np.ndarray, bound: float) -> np.ndarray:
    """Clip to [-bound, bound] and map linearly onto the colormap levels."""
    unit = (np.clip(values, -bound, bound) + bound) / (2.0 * bound)
    levels = np.round(unit * (COLOR_LEVELS - 1)).astype(np.int64)
    return color_table()[levels]


def render_plane(plane: FeaturePlane, component: int = 1, mode: str = "dino") -> np.ndarray:
    """(H, W, 3) uint8 image of a feature plane."""
    if mode not in CLIP_SIGMA:
        raise VisualizationError(f"unknown mode {mode!r}; expected one of {', '.join(CLIP_SIGMA)}")
    values = norm_map(plane) if mode in NORM_MODES else pca_projection(plane, component)
    return to_rgb(standardize(values), CLIP_SIGMA[mode])


def save_ppm(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PPM")


def visualize_file(plane_path: str, image_path: str, component: int = 1, mode: str = "dino") -> tuple[int, int]:
    """Render an FPLN file to a PPM image; returns the image ``(width, height)``."""
    plane = load_plane(plane_path)
    image = render_plane(plane, component, mode)
    save_ppm(image_path, image)
    logger.info("Wrote %s (%s mode, component %d)", image_path, mode, component)
    return image.shape[1], image.shape[0]
