"""Tests for the synthetic target feature generator."""

from __future__ import annotations

import os

import numpy as np

from src.cache_manager import build_cache
from src.featuremap import background_mask, load_plane
from src.geometry import look_at, make_icosphere, make_intrinsics
from src.synth import OMEGA_RANGE, draw_synth_params, feature_path, generate_features, position_plane, synth_plane


def _cache(poses):
    mesh = make_icosphere(2)
    intr = make_intrinsics(32, 32, 60.0)
    return mesh, build_cache(mesh, poses, intr, alpha=0.0, k=3, fov_deg=60.0)


def test_params_are_seeded_and_in_range():
    params = draw_synth_params(16, seed=3)
    assert params.channels == 16
    assert np.all((params.omega >= OMEGA_RANGE[0]) & (params.omega <= OMEGA_RANGE[1]))
    assert np.allclose(np.linalg.norm(params.normals, axis=1), 1.0)
    again = draw_synth_params(16, seed=3)
    assert np.array_equal(params.phase, again.phase)
    assert not np.array_equal(params.phase, draw_synth_params(16, seed=4).phase)


def test_plane_values_and_background():
    mesh, cache = _cache([look_at((0.0, 0.0, 3.0))])
    frame = cache.frames[0]
    plane = synth_plane(frame, mesh, draw_synth_params(5, seed=0), background=0.25)
    assert plane.shape == (32, 32, 5)
    assert np.all(np.abs(plane) <= 1.0)
    mask = background_mask(32, 32, frame.sites, frame.interior)
    assert np.all(plane[mask] == 0.25)
    # Occupied pixels see the exact vertex positions
    positions = position_plane(frame, mesh)
    sites = frame.sites
    assert np.array_equal(positions[sites.pixels[:, 0], sites.pixels[:, 1]], mesh.vertices[sites.vertices])


def test_generate_features_is_deterministic(tmp_path):
    mesh, cache = _cache([look_at((0.0, 0.0, 3.0)), look_at((0.4, 0.0, 3.0))])
    first = generate_features(cache, mesh, 4, seed=1, out_dir=os.path.join(tmp_path, "a"))
    second = generate_features(cache, mesh, 4, seed=1, out_dir=os.path.join(tmp_path, "b"))
    assert [os.path.basename(p) for p in first] == ["pose_0000.fpln", "pose_0001.fpln"]
    assert first[1] == feature_path(os.path.join(tmp_path, "a"), 1)
    for a, b in zip(first, second):
        assert np.array_equal(load_plane(a), load_plane(b))


def test_nearby_poses_differ_only_where_geometry_differs():
    mesh, cache = _cache([look_at((0.0, 0.0, 3.0)), look_at((0.05, 0.0, 3.0))])
    params = draw_synth_params(3, seed=2)
    a, b = (synth_plane(frame, mesh, params) for frame in cache.frames)
    changed = np.any(a != b, axis=2)
    # Pixels that are background in both views never change
    both_background = background_mask(32, 32, cache.frames[0].sites, cache.frames[0].interior) & background_mask(
        32, 32, cache.frames[1].sites, cache.frames[1].interior
    )
    assert not np.any(changed & both_background)
    assert changed.any()
