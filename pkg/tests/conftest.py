import math

import numpy as np
import pytest
import torch

from depthgan.camera import intrinsics_from_focal
from depthgan.config import resolve_config

TINY = {
    "model.resolution": 16,
    "model.latent_dim": 16,
    "model.mapping_layers": 1,
    "model.angle_frequencies": 2,
    "model.g_channel_base": 64,
    "model.g_channel_max": 8,
    "model.d_channel_base": 64,
    "model.d_channel_max": 8,
    "train.batch_size": 2,
}


def tiny_config(**extra):
    values = dict(TINY)
    values.update(extra)
    return resolve_config(overrides=values)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def k16():
    return intrinsics_from_focal(26, 36, 16, 16)


@pytest.fixture
def k64():
    return intrinsics_from_focal(26, 36, 64, 64)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


DEG = math.pi / 180.0


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
