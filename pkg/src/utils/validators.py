"""Validation utilities for register-adapt.

Small predicates shared by the geometry, optimizer and codec modules.
They never raise; callers decide which exception fits their domain.
"""

from __future__ import annotations

import numpy as np


ORTHONORMAL_TOLERANCE = 1e-9
UNIT_NORM_TOLERANCE = 1e-9


def is_finite_array(values: np.ndarray) -> bool:
    """Return True if every entry of ``values`` is finite (no NaN/Inf)."""
    return bool(np.all(np.isfinite(values)))


def is_rotation_matrix(rotation: np.ndarray, tol: float = ORTHONORMAL_TOLERANCE) -> bool:
    """Return True if ``rotation`` is a proper 3x3 rotation.

    Parameters
    ----------
    rotation: np.ndarray
        Candidate matrix.
    tol: float
        Allowed deviation of ``R^T R`` from the identity and of the
        determinant from +1.

    Returns
    -------
    bool
        True if the matrix is orthonormal and right-handed within ``tol``.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3) or not is_finite_array(rotation):
        return False
    if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(rotation) - 1.0) <= tol


def is_unit_vector(vector: np.ndarray, tol: float = UNIT_NORM_TOLERANCE) -> bool:
    """Return True if ``vector`` has Euclidean norm 1 within ``tol``."""
    vector = np.asarray(vector, dtype=np.float64)
    return bool(is_finite_array(vector) and abs(np.linalg.norm(vector) - 1.0) <= tol)


def first_non_finite(values: np.ndarray) -> int | None:
    """Return the flat index of the first non-finite entry, or None."""
    bad = np.flatnonzero(~np.isfinite(np.asarray(values)))
    return int(bad[0]) if bad.size else None
