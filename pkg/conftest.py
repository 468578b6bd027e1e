"""
Shared pytest fixtures (tiny run configurations, synthetic domain folders) and
the opt-in switch for slow end-to-end tests.
"""
from pathlib import Path
from typing import Callable, Tuple

import pytest
import torch

from gadan.schemas.training import TrainConfig
from gadan.services.toy_domains import make_toy_domains


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def toy_dirs(tmp_path_factory) -> Tuple[Path, Path]:
    """Six 32x32 images per domain."""
    return make_toy_domains(tmp_path_factory.mktemp("toy"), count=6, size=32, seed=3)


@pytest.fixture
def make_config(toy_dirs, tmp_path) -> Callable[..., TrainConfig]:
    """Factory for small configs; keyword arguments override any field."""
    x_dir, y_dir = toy_dirs

    def _make(**overrides) -> TrainConfig:
        values = dict(
            transform_kind="homography",
            image_size=32,
            localization_size=32,
            code_dim=4,
            generator_channels=4,
            residual_blocks=1,
            discriminator_channels=4,
            batch_size=2,
            steps=2,
            checkpoint_every=1,
            log_every=1,
            seed=0,
            domain_x_dir=x_dir,
            domain_y_dir=y_dir,
            checkpoint_dir=tmp_path / "checkpoints",
        )
        values.update(overrides)
        return TrainConfig(**values)

    return _make


@pytest.fixture
def tiny_config(make_config) -> TrainConfig:
    return make_config()


@pytest.fixture
def images() -> torch.Tensor:
    """Two random 3 x 32 x 32 images in [-1, 1]."""
    gen = torch.Generator().manual_seed(1234)
    return torch.rand(2, 3, 32, 32, generator=gen) * 2 - 1
