"""Entry point for the register-adapt command-line tool.

This module ties together argument parsing, logging setup and the command
handlers. Run it with ``python -m src.register_adapt <command> ...``.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from .alphashape import AlphaShapeError
from .cache_manager import CacheError
from .config_manager import ConfigurationError, load_config
from .featuremap import FeatureMapError
from .geometry import GeometryError
from .handlers import command_handler
from .lora import LoraError
from .optim import OptimizerError
from .registers import RegisterError
from .training_manager import InferenceError, TrainingError
from .utils.binary_io import FormatError
from .utils.logger import get_logger, setup_logging
from .visibility import VisibilityError
from .visualize import CLIP_SIGMA, VisualizationError

DOMAIN_ERRORS = (
    ConfigurationError,
    GeometryError,
    VisibilityError,
    AlphaShapeError,
    FeatureMapError,
    RegisterError,
    LoraError,
    OptimizerError,
    CacheError,
    FormatError,
    TrainingError,
    InferenceError,
    VisualizationError,
    OSError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="register-adapt", description="Register-guided LoRA adaptation toolkit")
    parser.add_argument("--log-file", help="also write logs to this file (rotated at 10MB)")
    sub = parser.add_subparsers(dest="command", required=True)

    scene = sub.add_parser("scene", help="write a demo icosphere mesh and a ring of poses")
    scene.add_argument("--out-dir", required=True)
    scene.add_argument("--subdivisions", type=int, default=3)
    scene.add_argument("--poses", type=int, default=8)
    scene.add_argument("--distance", type=float, default=4.0)
    scene.add_argument("--config")
    scene.set_defaults(handler=command_handler.cmd_scene)

    preprocess = sub.add_parser("preprocess", help="build the per-pose preprocessing cache")
    preprocess.add_argument("--mesh", required=True)
    preprocess.add_argument("--poses", required=True)
    preprocess.add_argument("--config")
    preprocess.add_argument("--out", required=True)
    preprocess.set_defaults(handler=command_handler.cmd_preprocess)

    synth = sub.add_parser("synth", help="generate synthetic target features")
    synth.add_argument("--mesh", required=True)
    synth.add_argument("--poses", required=True)
    synth.add_argument("--cache", required=True)
    synth.add_argument("--config")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=command_handler.cmd_synth)

    adapt = sub.add_parser("adapt", help="train the register and the LoRA adapter head")
    adapt.add_argument("--mesh", required=True)
    adapt.add_argument("--poses", required=True)
    adapt.add_argument("--cache", required=True)
    adapt.add_argument("--features", required=True)
    adapt.add_argument("--config")
    adapt.add_argument("--iters", type=int)
    adapt.add_argument("--batch", type=int)
    adapt.add_argument("--seed", type=int)
    adapt.add_argument("--out", required=True)
    adapt.set_defaults(handler=command_handler.cmd_adapt)

    infer = sub.add_parser("infer", help="merge the adapters and run the source features through the head")
    infer.add_argument("--checkpoint", required=True, help="directory written by adapt")
    infer.add_argument("--features", required=True)
    infer.add_argument("--pose", type=int, default=0)
    infer.add_argument("--config")
    infer.add_argument("--unmerged", action="store_true", help="request the factored path (refused)")
    infer.add_argument("--out", required=True)
    infer.set_defaults(handler=command_handler.cmd_infer)

    visualize = sub.add_parser("visualize", help="render a feature plane as a PPM image")
    visualize.add_argument("--plane", required=True)
    visualize.add_argument("--component", type=int, default=1)
    visualize.add_argument("--mode", choices=tuple(CLIP_SIGMA), default="dino")
    visualize.add_argument("--config")
    visualize.add_argument("--out", required=True)
    visualize.set_defaults(handler=command_handler.cmd_visualize)

    check = sub.add_parser("gradcheck", help="finite-difference check of the adaptation objective")
    check.add_argument("--scale", choices=("desk",), default="desk")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--tolerance", type=float, default=1e-4)
    check.add_argument("--max-coords", type=int)
    check.add_argument("--config")
    check.set_defaults(handler=command_handler.cmd_gradcheck)
    return parser


def _log_level(config_path: Optional[str]) -> str:
    try:
        return load_config(config_path).log_level
    except ConfigurationError:
        # the handler reloads the config and reports the error
        return os.getenv("LOG_LEVEL", "INFO")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entrypoint for the CLI."""
    args = build_parser().parse_args(argv)
    setup_logging(_log_level(args.config), args.log_file)
    logger = get_logger("RegisterAdapt")
    try:
        return args.handler(args)
    except DOMAIN_ERRORS as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
