"""End-to-end tests for the register-adapt command line."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from src.featuremap import load_plane, save_plane
from src.register_adapt import main

SMALL_CONFIG = """\
HEIGHT=16
WIDTH=16
FOV_DEG=40
EMBED_DIM=4
OUT_DIM=3
KNN_K=3
ALPHA=0
LORA_RANK=1
ITERATIONS=3
BATCH_SIZE=1
LOG_EVERY=1
"""


@pytest.fixture
def workspace(tmp_path):
    config = os.path.join(tmp_path, "small.env")
    with open(config, "w", encoding="utf-8") as handle:
        handle.write(SMALL_CONFIG)
    return str(tmp_path), config


def _run(*argv) -> int:
    return main([str(arg) for arg in argv])


def test_full_pipeline(workspace, capsys):
    root, config = workspace
    scene = os.path.join(root, "scene")
    mesh, poses = os.path.join(scene, "mesh.obj"), os.path.join(scene, "poses.json")
    cache = os.path.join(root, "cache.pcch")
    features = os.path.join(root, "features")
    run = os.path.join(root, "run")

    assert _run("scene", "--out-dir", scene, "--subdivisions", 2, "--poses", 3, "--config", config) == 0
    with open(poses, encoding="utf-8") as handle:
        document = json.load(handle)
    assert len(document["poses"]) == 3
    assert "162 vertices" in capsys.readouterr().out

    assert _run("preprocess", "--mesh", mesh, "--poses", poses, "--config", config, "--out", cache) == 0
    assert "Cached 3/3 poses" in capsys.readouterr().out

    assert _run("synth", "--mesh", mesh, "--poses", poses, "--cache", cache, "--config", config, "--out", features) == 0
    assert sorted(os.listdir(features)) == ["pose_0000.fpln", "pose_0001.fpln", "pose_0002.fpln"]

    assert _run(
        "adapt", "--mesh", mesh, "--poses", poses, "--cache", cache, "--features", features,
        "--config", config, "--iters", 2, "--out", run,
    ) == 0
    with open(os.path.join(run, "metrics.csv"), encoding="utf-8") as handle:
        assert len(handle.read().splitlines()) == 3
    assert {"register.rgpm", "adapter.lora", "head.dens"} <= set(os.listdir(run))

    predicted = os.path.join(root, "predicted.fpln")
    assert _run("infer", "--checkpoint", run, "--features", features, "--out", predicted) == 0
    assert load_plane(predicted).shape == (16, 16, 3)
    assert "head parameters 9 (base head 9)" in capsys.readouterr().out
    assert os.path.exists(os.path.join(run, "merged_head.dens"))

    image = os.path.join(root, "predicted.ppm")
    assert _run("visualize", "--plane", predicted, "--mode", "norm", "--out", image) == 0
    assert "(16x16)" in capsys.readouterr().out
    assert _run("visualize", "--plane", predicted, "--mode", "register-norm", "--out", image) == 0


def test_gradcheck_command(capsys):
    assert _run("gradcheck", "--max-coords", 20) == 0
    assert "PASS" in capsys.readouterr().out


def test_domain_errors_exit_with_status_one(workspace):
    root, config = workspace
    missing = os.path.join(root, "absent")
    assert _run("synth", "--mesh", missing, "--poses", missing, "--cache", missing, "--out", root) == 1
    assert _run("visualize", "--plane", os.path.join(root, "absent.fpln"), "--out", os.path.join(root, "x.ppm")) == 1
    assert _run("scene", "--out-dir", root, "--config", os.path.join(root, "absent.env")) == 1


def test_unmerged_inference_is_refused(workspace):
    root, _ = workspace
    features = os.path.join(root, "features")
    os.makedirs(features)
    save_plane(os.path.join(features, "pose_0000.fpln"), np.zeros((4, 4, 3)))
    assert _run("infer", "--checkpoint", root, "--features", features, "--unmerged", "--out", os.path.join(root, "o")) == 1


def test_log_file_is_accepted(workspace):
    root, config = workspace
    log_file = os.path.join(root, "logs", "run.log")
    assert _run("--log-file", log_file, "scene", "--out-dir", os.path.join(root, "s"), "--subdivisions", 0, "--config", config) == 0
