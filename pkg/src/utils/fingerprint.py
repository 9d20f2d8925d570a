"""Fingerprint utilities for register-adapt.

The preprocessing cache is keyed by a 64-bit fingerprint of everything that
determines a frame: mesh bytes, camera pose, intrinsics, the alpha parameter
and k. Inputs are normalized to fixed little-endian float64/int64 byte
strings before hashing so the same geometry always yields the same value,
independent of the dtype it was loaded with.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np


def _canonical_bytes(values: np.ndarray, kind: str) -> bytes:
    """Return a canonical little-endian byte string for ``values``."""
    dtype = "<f8" if kind == "f" else "<i8"
    return np.ascontiguousarray(np.asarray(values), dtype=dtype).tobytes()


def hash_arrays(parts: Iterable[tuple[str, np.ndarray, str]]) -> int:
    """Compute a 64-bit hash over labelled arrays.

    Parameters
    ----------
    parts: iterable of (label, array, kind)
        ``kind`` is ``"f"`` for real-valued data and ``"i"`` for integers.
        Labels and shapes are mixed into the digest so that reshaping or
        reordering fields changes the result.

    Returns
    -------
    int
        The first 8 bytes of the SHA256 digest as an unsigned integer.
    """
    digest = hashlib.sha256()
    for label, values, kind in parts:
        values = np.asarray(values)
        digest.update(label.encode("utf-8"))
        digest.update(np.asarray(values.shape, dtype="<i8").tobytes())
        digest.update(_canonical_bytes(values, kind))
    return int.from_bytes(digest.digest()[:8], "little")


def frame_fingerprint(
    vertices: np.ndarray,
    faces: np.ndarray,
    rotation: np.ndarray,
    translation: np.ndarray,
    intrinsics: tuple[float, float, float, float, int, int],
    alpha: float,
    k: int,
) -> int:
    """Fingerprint of one preprocessing frame.

    Parameters
    ----------
    vertices, faces: np.ndarray
        Mesh arrays.
    rotation, translation: np.ndarray
        World-to-camera pose.
    intrinsics: tuple
        ``(focal_x, focal_y, principal_x, principal_y, width, height)``.
    alpha: float
        Alpha-shape parameter.
    k: int
        Neighbour count of the k-NN table.
    """
    return hash_arrays(
        [
            ("vertices", vertices, "f"),
            ("faces", faces, "i"),
            ("rotation", rotation, "f"),
            ("translation", translation, "f"),
            ("intrinsics", np.asarray(intrinsics, dtype=np.float64), "f"),
            ("alpha", np.asarray([alpha], dtype=np.float64), "f"),
            ("k", np.asarray([k]), "i"),
        ]
    )
