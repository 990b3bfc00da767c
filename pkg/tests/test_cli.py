import json
import os
from pathlib import Path

import numpy as np
import pytest

from depthgan import io
from depthgan.cli import CONFIG_ECHO, main
from depthgan.config import parse_config_text, resolve_config

TINY_CFG = """
model.resolution = 64
model.latent_dim = 16
model.mapping_layers = 1
model.g_channel_max = 8
model.d_channel_max = 8
model.branch_channels = 8
train.batch_size = 2
train.checkpoint_every = 2
data.n_scenes = 3
data.angles_per_scene = 2
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "desk.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["make-toy-data", "--config", str(cfg), "--run-dir", str(root / "data_run"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--steps", "3", "--run-dir", str(root / "train")]) == 0
    return root


def test_make_toy_data(trained):
    manifest = json.loads((trained / "data" / "manifest.json").read_text())
    assert len(manifest["records"]) == 6
    assert (trained / "data_run" / CONFIG_ECHO).exists()


def test_train_outputs(trained):
    run = trained / "train"
    assert (run / "checkpoints" / "latest").exists()
    assert (run / "checkpoints" / "ckpt-0000003.pt").exists()
    lines = (run / "metrics.log").read_text().splitlines()
    assert {l.split("\t")[0] for l in lines} == {"1", "2", "3"}
    echo = resolve_config(parse_config_text((run / CONFIG_ECHO).read_text()))
    assert echo.train.steps == 3 and echo.data.root == str(trained / "data")


def test_config_echo_replays_run(trained, tmp_path):
    echo = trained / "train" / CONFIG_ECHO
    assert main(["train", "--config", str(echo), "--run-dir", str(tmp_path / "replay")]) == 0
    a = (trained / "train" / "metrics.log").read_text()
    b = (tmp_path / "replay" / "metrics.log").read_text()
    assert a == b


def test_resume(trained, tmp_path):
    ckpt = trained / "train" / "checkpoints"
    cfg = trained / "train" / CONFIG_ECHO
    assert main(["train", "--config", str(cfg), "--steps", "4", "--resume", str(ckpt), "--run-dir", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "checkpoints" / "ckpt-0000004.pt").exists()
    assert main(["train", "--config", str(cfg), "--set", "train.lr=0.1", "--resume", str(ckpt), "--run-dir", str(tmp_path / "bad")]) == 3


def test_sample_sweep_interpolate_export(trained, tmp_path):
    ck = str(trained / "train" / "checkpoints")
    assert main(["sample", "--checkpoint", ck, "--n", "2", "--run-dir", str(tmp_path / "s")]) == 0
    assert len(list((tmp_path / "s").glob("sample_*_rgb.png"))) == 2
    assert main(["sweep", "--checkpoint", ck, "--angles", "-15,-7.5,0,7.5,15", "--run-dir", str(tmp_path / "w")]) == 0
    from PIL import Image

    assert Image.open(tmp_path / "w" / "sweep.png").width == 5 * 64
    assert main(["interpolate", "--checkpoint", ck, "--which", "appearance", "--n-steps", "3", "--run-dir", str(tmp_path / "i")]) == 0
    assert (tmp_path / "i" / "interpolation.png").exists()
    assert main(["export-pointcloud", "--checkpoint", ck, "--theta", "-5", "--run-dir", str(tmp_path / "p")]) == 0
    pts, _ = io.read_ply(tmp_path / "p" / "pointcloud.ply")
    assert pts.shape == (64 * 64, 3)
    for sub in "swip":
        assert (tmp_path / sub / CONFIG_ECHO).exists()


def test_metrics_and_predict_depth(trained, tmp_path):
    ck = str(trained / "train" / "checkpoints")
    args = ["metrics", "--checkpoint", ck, "--data", str(trained / "data"), "--n-pairs", "4", "--run-dir", str(tmp_path / "m")]
    assert main(args) == 0
    report = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert {"RP", "RC", "DP_real", "DP_fake", "FD_random-conv"} <= set(report)
    assert report["RP"]["n"] == 4
    image = trained / "data" / "rgb" / "000000_00.png"
    assert main(["predict-depth", "--checkpoint", ck, "--image", str(image), "--run-dir", str(tmp_path / "d")]) == 0
    classes = np.load(tmp_path / "d" / "depth_classes.npy")
    assert classes.shape == (32, 32) and classes.min() >= 0 and classes.max() <= 9


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["--help"]) == 0


def test_config_errors(tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHGAN_RUN_ROOT", str(tmp_path / "runs"))
    assert main(["train"]) == 2
    err_cfg = tmp_path / "bad.cfg"
    err_cfg.write_text("train.nope = 3\n")
    assert main(["train", "--config", str(err_cfg), "--data", "x"]) == 2
    assert main(["make-toy-data", "--set", "train.batch_size=1"]) == 2
    assert not (tmp_path / "runs").exists()


def test_missing_key_message(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("DEPTHGAN_RUN_ROOT", str(tmp_path))
    main(["train"])
    assert "data.root" in capsys.readouterr().err


def test_runtime_errors_and_append_only(trained, tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHGAN_RUN_ROOT", str(tmp_path / "runs"))
    assert main(["sample", "--checkpoint", str(tmp_path / "none.pt")]) == 3
    ck = str(trained / "train" / "checkpoints")
    run = tmp_path / "keep"
    assert main(["sample", "--checkpoint", ck, "--n", "1", "--run-dir", str(run)]) == 0
    assert main(["sample", "--checkpoint", ck, "--n", "1", "--run-dir", str(run)]) == 3
    assert main(["sample", "--checkpoint", ck, "--n", "1", "--run-dir", str(run), "--force"]) == 0


def test_default_run_root(trained, tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHGAN_RUN_ROOT", str(tmp_path))
    ck = str(trained / "train" / "checkpoints")
    assert main(["sample", "--checkpoint", ck, "--n", "1"]) == 0
    assert main(["sample", "--checkpoint", ck, "--n", "1"]) == 0
    runs = sorted(p.name for p in tmp_path.iterdir())
    assert len(runs) == 2 and all(r.startswith("sample-") for r in runs)
