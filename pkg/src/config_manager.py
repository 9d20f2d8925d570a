"""Configuration loading for register-adapt.

The config file is a dotenv-style ``KEY=VALUE`` document. Every key is
optional; omitted keys take the values used for the published adaptation
runs (296x296 planes, D=512, D_out=256, k=11, alpha=0.065, rank 32,
lambda_feat=2, lambda_reg=20, learning rates 1e-4/1e-3, 1000 iterations,
batch 2).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional

from dotenv import dotenv_values


class ConfigurationError(Exception):
    """Raised when configuration is missing or invalid."""
    pass


_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


@dataclass(frozen=True)
class AdaptConfig:
    """Resolved adaptation configuration."""

    height: int = 296
    width: int = 296
    embed_dim: int = 512
    out_dim: int = 256
    knn_k: int = 11
    alpha: float = 0.065
    lora_rank: int = 32
    lambda_feat: float = 2.0
    lambda_reg: float = 20.0
    lr_lora: float = 1e-4
    lr_register: float = 1e-3
    iterations: int = 1000
    batch_size: int = 2
    seed: int = 0
    fov_deg: float = 30.0
    lr_start_factor: float = 1.0
    lr_end_factor: float = 0.1
    workers: int = 1
    log_every: int = 50
    synth_background: float = 0.0
    log_level: str = "INFO"

    @property
    def eproc1_channels(self) -> list[int]:
        """Output channels of E_proc-1: [D, D, D_out, D_out]."""
        return [self.embed_dim, self.embed_dim, self.out_dim, self.out_dim]

    @property
    def eproc2_channels(self) -> list[int]:
        """Output channels of E_proc-2: four layers of D_out."""
        return [self.out_dim] * 4

    def with_overrides(self, **changes) -> "AdaptConfig":
        """Return a validated copy with ``changes`` applied (None values ignored)."""
        changes = {key: value for key, value in changes.items() if value is not None}
        updated = replace(self, **changes)
        _validate(updated)
        return updated


def _parse(values: Mapping[str, Optional[str]], key: str, default, cast: Callable, check: Callable, rule: str):
    raw = values.get(key)
    if raw is None or not str(raw).strip():
        return default
    try:
        value = cast(str(raw).strip())
    except ValueError as e:
        raise ConfigurationError(f"Invalid {key} value: {e}")
    if not check(value):
        raise ConfigurationError(f"Invalid {key} value: {rule} (got: {raw})")
    return value


def _validate(config: AdaptConfig) -> None:
    # the adapter head is D_out x D_out
    if config.lora_rank > config.out_dim:
        raise ConfigurationError(
            f"LORA_RANK must not exceed OUT_DIM ({config.lora_rank} > {config.out_dim})"
        )
    if not 0 < config.lr_end_factor <= config.lr_start_factor:
        raise ConfigurationError(
            "LR_END_FACTOR must satisfy 0 < LR_END_FACTOR <= LR_START_FACTOR "
            f"(got {config.lr_end_factor}, {config.lr_start_factor})"
        )
    if config.log_level not in _LOG_LEVELS:
        raise ConfigurationError(
            f"LOG_LEVEL must be one of DEBUG, INFO, WARNING, ERROR, CRITICAL (got: {config.log_level})"
        )
    for name in ("height", "width", "embed_dim", "out_dim", "knn_k", "lora_rank", "batch_size", "workers", "log_every"):
        if getattr(config, name) < 1:
            raise ConfigurationError(f"{name.upper()} must be at least 1")
    if config.iterations < 0:
        raise ConfigurationError("ITERATIONS cannot be negative")


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> AdaptConfig:
    """Load configuration from a dotenv-style file.

    Parameters
    ----------
    path: str, optional
        Config file. ``None`` or an empty file yields the defaults.
    overrides: mapping, optional
        Field-name overrides (e.g. from CLI flags); ``None`` values are ignored.

    Returns
    -------
    AdaptConfig
        The validated configuration.
    """
    values: dict[str, Optional[str]] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}")
        values = dict(dotenv_values(path))

    positive = lambda v: v > 0
    at_least_one = lambda v: v >= 1
    non_negative = lambda v: v >= 0

    log_level = values.get("LOG_LEVEL") or os.getenv("LOG_LEVEL", "INFO")

    config = AdaptConfig(
        height=_parse(values, "HEIGHT", 296, int, at_least_one, "must be at least 1"),
        width=_parse(values, "WIDTH", 296, int, at_least_one, "must be at least 1"),
        embed_dim=_parse(values, "EMBED_DIM", 512, int, at_least_one, "must be at least 1"),
        out_dim=_parse(values, "OUT_DIM", 256, int, at_least_one, "must be at least 1"),
        knn_k=_parse(values, "KNN_K", 11, int, at_least_one, "must be at least 1"),
        alpha=_parse(values, "ALPHA", 0.065, float, non_negative, "cannot be negative"),
        lora_rank=_parse(values, "LORA_RANK", 32, int, at_least_one, "must be at least 1"),
        lambda_feat=_parse(values, "LAMBDA_FEAT", 2.0, float, non_negative, "cannot be negative"),
        lambda_reg=_parse(values, "LAMBDA_REG", 20.0, float, non_negative, "cannot be negative"),
        lr_lora=_parse(values, "LR_LORA", 1e-4, float, positive, "must be positive"),
        lr_register=_parse(values, "LR_REGISTER", 1e-3, float, positive, "must be positive"),
        iterations=_parse(values, "ITERATIONS", 1000, int, non_negative, "cannot be negative"),
        batch_size=_parse(values, "BATCH_SIZE", 2, int, at_least_one, "must be at least 1"),
        seed=_parse(values, "SEED", 0, int, non_negative, "cannot be negative"),
        fov_deg=_parse(values, "FOV_DEG", 30.0, float, lambda v: 0 < v < 180, "must be between 0 and 180"),
        lr_start_factor=_parse(values, "LR_START_FACTOR", 1.0, float, positive, "must be positive"),
        lr_end_factor=_parse(values, "LR_END_FACTOR", 0.1, float, positive, "must be positive"),
        workers=_parse(values, "WORKERS", 1, int, at_least_one, "must be at least 1"),
        log_every=_parse(values, "LOG_EVERY", 50, int, at_least_one, "must be at least 1"),
        synth_background=_parse(values, "SYNTH_BACKGROUND", 0.0, float, lambda v: True, "must be a number"),
        log_level=str(log_level).strip().upper(),
    )
    _validate(config)
    if overrides:
        config = config.with_overrides(**overrides)
    return config
