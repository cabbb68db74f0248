from pathlib import Path

import numpy as np
import pytest

from src.config import ModelConfig, SceneSpec
from src.data import generate_synthetic_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_values(**overrides) -> dict:
    """A small network that runs a train step in well under a second."""
    values = {
        "backbone_widths": [4, 4, 8, 8],
        "fc_width": 16,
        "mask_width": 4,
        "mask_preset": "14",
        "rpn": {"conv_width": 8, "batch_size": 64, "pre_nms_top_n": 300},
        "head": {"k_train": 60, "batch_size": 16},
        "infer": {"k_infer": 30},
        "train": {"iterations": 3, "lr": 0.001},
    }
    values.update(overrides)
    return values


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig.model_validate(tiny_model_values())


@pytest.fixture
def tiny_scene() -> SceneSpec:
    return SceneSpec(image_size=(64, 64), objects_per_scene=(1, 1), seed=7)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_scene) -> Path:
    """Three generated scenes; returns the dataset directory."""
    out = tmp_path / "data"
    generate_synthetic_dataset(tiny_scene, 3, out)
    return out
