"""Tests for dotenv configuration loading and validation."""

from __future__ import annotations

import os

import pytest

from src.config_manager import AdaptConfig, ConfigurationError, load_config

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def _write(tmp_path, text: str) -> str:
    path = os.path.join(tmp_path, "run.env")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    return path


@pytest.fixture(autouse=True)
def _clean_log_level(monkeypatch):
    monkeypatch.delenv("LOG_LEVEL", raising=False)


def test_empty_file_gives_published_defaults(tmp_path):
    config = load_config(_write(tmp_path, ""))
    assert config == AdaptConfig()
    assert (config.height, config.width) == (296, 296)
    assert (config.embed_dim, config.out_dim, config.knn_k) == (512, 256, 11)
    assert config.alpha == 0.065
    assert config.lora_rank == 32
    assert (config.lambda_feat, config.lambda_reg) == (2.0, 20.0)
    assert (config.lr_lora, config.lr_register) == (1e-4, 1e-3)
    assert (config.iterations, config.batch_size) == (1000, 2)
    assert config.eproc1_channels == [512, 512, 256, 256]
    assert config.eproc2_channels == [256] * 4
    assert load_config(None) == config


def test_shipped_configs_are_valid():
    assert load_config(os.path.join(CONFIG_DIR, "default.env")) == AdaptConfig()
    desk = load_config(os.path.join(CONFIG_DIR, "desk.env"))
    assert (desk.height, desk.embed_dim, desk.out_dim, desk.knn_k, desk.lora_rank) == (64, 16, 8, 5, 4)


def test_values_are_parsed(tmp_path):
    path = _write(tmp_path, "# comment\nHEIGHT=32\nWIDTH=48\nALPHA=0\nLOG_LEVEL=debug\nSYNTH_BACKGROUND=-0.5\n")
    config = load_config(path)
    assert (config.height, config.width) == (32, 48)
    assert config.alpha == 0.0
    assert config.log_level == "DEBUG"
    assert config.synth_background == -0.5


@pytest.mark.parametrize(
    "line",
    [
        "HEIGHT=0",
        "KNN_K=three",
        "ALPHA=-0.1",
        "LR_LORA=0",
        "FOV_DEG=180",
        "ITERATIONS=-1",
        "LOG_LEVEL=LOUD",
        "OUT_DIM=8\nLORA_RANK=16",
        "LR_START_FACTOR=0.5\nLR_END_FACTOR=0.9",
    ],
)
def test_invalid_values_are_rejected(tmp_path, line):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, line + "\n"))


def test_missing_file_is_an_error(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(os.path.join(tmp_path, "absent.env"))


def test_overrides_apply_and_validate(tmp_path):
    path = _write(tmp_path, "ITERATIONS=10\nOUT_DIM=8\nLORA_RANK=2\n")
    config = load_config(path, overrides={"iterations": 3, "batch_size": None, "seed": 7})
    assert config.iterations == 3
    assert config.batch_size == 2
    assert config.seed == 7
    with pytest.raises(ConfigurationError):
        load_config(path, overrides={"lora_rank": 9})


def test_log_level_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "warning")
    assert load_config(_write(tmp_path, "")).log_level == "WARNING"
