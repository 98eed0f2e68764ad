"""
Shared pytest configuration and fixtures
"""
import sys
from pathlib import Path

import pytest
import torch

PROJECT_ROOT = Path(__file__).parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from config.settings import build_config  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow acceptance tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough for CPU unit tests"""

    def make(*overrides):
        base = [
            "resolution=32",
            "clip_len=3",
            "batch_clips=2",
            "epochs=10",
            "model.encoder_channels=[8, 8, 16, 16]",
            "model.guidance_channels=[8, 16]",
            "model.head_channels=8",
            "model.ffn_expansion=2",
            "model.time_embed_dim=16",
            "diffusion.sample_steps=3",
            "synthetic.videos=2",
            "synthetic.frames=3",
            f"output_dir={tmp_path / 'run'}",
        ]
        return build_config({}, base + list(overrides))

    return make


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
