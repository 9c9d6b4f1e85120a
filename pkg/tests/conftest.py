import numpy as np
import pytest
import torch

from stssl.dataio import generate_synthetic_dataset
from stssl.model import ModelConfig
from stssl.trainer import TrainConfig

TINY_MODEL = dict(encoder_channels=[4, 8], decoder_channels=[4], primary_capsules=2, primary_dim=4,
                  capsule_dim=4, dense_hidden=8)


def tiny_config(**overrides) -> TrainConfig:
    """Small model on 16x16 clips; fast enough for a few CPU steps."""
    base = TrainConfig(epochs=2, resolution=16, frames=8, skip=1, batch_size=4,
                       labeled_fraction=0.5, lr=1e-3, model=ModelConfig(**TINY_MODEL))
    return base.with_overrides(overrides)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_synthetic_dataset(root, num_videos=12, classes=2, frames_per_video=10, height=32,
                               width=32, seed=3, val_fraction=0.25)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
