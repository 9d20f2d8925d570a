"""Command handlers for the register-adapt CLI.

Each ``cmd_*`` function receives the parsed ``argparse.Namespace`` for its
subcommand, does its work through the service modules and returns a process
exit status. Domain errors propagate to ``register_adapt.main``, which logs
them and exits with status 1.
"""

from __future__ import annotations

import argparse
import os

from ..cache_manager import build_cache, load_cache, save_cache, verify_cache
from ..config_manager import AdaptConfig, load_config
from ..featuremap import load_plane, save_plane
from ..geometry import load_obj, load_poses, make_icosphere, make_intrinsics, ring_poses, save_poses, write_obj
from ..lora import save_dense
from ..synth import feature_path, generate_features
from ..training_manager import (
    AdaptationTrainer,
    MERGED_HEAD_FILE,
    METRICS_FILE,
    TrainingError,
    gradcheck_desk,
    load_features,
    run_inference,
)
from ..utils.logger import get_logger
from ..utils.performance import resource_summary
from ..visualize import visualize_file

logger = get_logger(__name__)


def _config(args: argparse.Namespace, **overrides) -> AdaptConfig:
    return load_config(getattr(args, "config", None), overrides=overrides or None)


def _camera_mismatch(camera: dict, config: AdaptConfig) -> None:
    expected = {"fov_deg": config.fov_deg, "width": config.width, "height": config.height}
    for key, value in camera.items():
        if float(value) != float(expected[key]):
            logger.warning("Pose document has %s=%s; using the configured %s", key, value, expected[key])


def cmd_scene(args: argparse.Namespace) -> int:
    """Write an icosphere mesh and a ring of poses framing it."""
    config = _config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    mesh = make_icosphere(args.subdivisions)
    poses = ring_poses(args.poses, distance=args.distance)
    mesh_path = os.path.join(args.out_dir, "mesh.obj")
    poses_path = os.path.join(args.out_dir, "poses.json")
    write_obj(mesh_path, mesh)
    save_poses(poses_path, poses, fov_deg=config.fov_deg, width=config.width, height=config.height)
    print(f"Wrote {mesh_path} ({mesh.vertex_count} vertices) and {poses_path} ({len(poses)} poses)")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    """Build the per-pose preprocessing cache."""
    config = _config(args)
    mesh = load_obj(args.mesh)
    poses, camera = load_poses(args.poses)
    _camera_mismatch(camera, config)
    intr = make_intrinsics(config.width, config.height, config.fov_deg)
    cache = build_cache(mesh, poses, intr, config.alpha, config.knn_k, config.fov_deg, workers=config.workers)
    for index, message in sorted(cache.errors.items()):
        print(f"pose {index}: {message}")
    if not cache.frames:
        logger.error("Every pose failed; no cache written")
        return 1
    save_cache(args.out, cache)
    print(f"Cached {len(cache.frames)}/{len(poses)} poses to {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """Generate synthetic target features for every cached pose."""
    config = _config(args)
    if not os.path.exists(args.cache):
        raise TrainingError(f"preprocess cache not found: {args.cache}")
    mesh = load_obj(args.mesh)
    poses, _ = load_poses(args.poses)
    cache = load_cache(args.cache)
    verify_cache(cache, mesh, poses, make_intrinsics(config.width, config.height, config.fov_deg))
    seed = config.seed if args.seed is None else args.seed
    paths = generate_features(cache, mesh, config.out_dim, seed, args.out, background=config.synth_background)
    print(f"Wrote {len(paths)} feature planes to {args.out}")
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    """Train the register and the adapter head; write checkpoints and metrics."""
    config = _config(args, iterations=args.iters, batch_size=args.batch, seed=args.seed)
    mesh = load_obj(args.mesh)
    poses, _ = load_poses(args.poses)
    cache = load_cache(args.cache)
    verify_cache(cache, mesh, poses, make_intrinsics(config.width, config.height, config.fov_deg))
    features = load_features(args.features, cache, config.out_dim)
    trainer = AdaptationTrainer(config, mesh, cache, features)
    os.makedirs(args.out, exist_ok=True)
    history = trainer.run(os.path.join(args.out, METRICS_FILE))
    trainer.save(args.out)
    first, last = history[0], history[-1]
    print(f"L_register {first.l_register:.6f} -> {last.l_register:.6f} over {config.iterations} iterations ({resource_summary()})")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    """Merge the adapters and run the source features through the head."""
    f_src = load_plane(feature_path(args.features, args.pose))
    result = run_inference(args.checkpoint, f_src, merged=not args.unmerged)
    save_plane(args.out, result.plane)
    save_dense(os.path.join(args.checkpoint, MERGED_HEAD_FILE), [layer.W for layer in result.head])
    print(f"Wrote {args.out}; head parameters {result.parameter_count} (base head {result.base_parameter_count})")
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    """Render a feature plane to a PPM image."""
    width, height = visualize_file(args.plane, args.out, component=args.component, mode=args.mode)
    print(f"Wrote {args.out} ({width}x{height})")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of the adaptation objective on the desk instance."""
    report = gradcheck_desk(seed=args.seed, tolerance=args.tolerance, max_coords=args.max_coords)
    print(report.format())
    return 0 if report.passed else 1
