"""Shared fixtures: small model configurations and synthetic frames."""

import numpy as np
import pytest

from iacodec.model import CodecConfig, CodecModel
from iacodec.synthetic import texture_frames

# Verdict lines collected by the acceptance tests, echoed after the run
# summary so they stay visible even when output capture is on.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config() -> CodecConfig:
    """A config small enough for finite-difference and fuzz loops."""
    return CodecConfig(codec_channels=6, latent_channels=6, hyper_channels=3)


def tiny_model(seed: int = 0) -> CodecModel:
    return CodecModel(tiny_config(), rng=np.random.default_rng(seed))


def tiny_frames(seed: int = 0, count: int = 2, size: int = 32) -> list:
    return texture_frames(seed, frames=count, size=size)


@pytest.fixture
def model():
    return tiny_model(0)


@pytest.fixture
def frames():
    return tiny_frames(0, count=2, size=32)
