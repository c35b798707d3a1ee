import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from irkd.backbone import ModelConfig  # noqa: E402
from irkd.data import generate_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset shared by the integration tests."""
    return generate_synthetic(20, 4, 32, seed=3, out_dir=tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(input_channels=3, block_channels=[4, 8], num_classes=4, input_size=32)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
