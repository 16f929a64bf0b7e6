import numpy as np
import pytest

from fanlab.data.dataset import load_dataset
from fanlab.data.synth import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """Twenty 5-point synthetic faces shared by the slower tests."""
    out = tmp_path_factory.mktemp("synth5")
    synth_generate(20, seed=7, out_dir=out, num_landmarks=5)
    return out


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return load_dataset(small_dataset_dir, require_depth=True)


def pytest_terminal_summary(terminalreporter):
    from ._acceptance import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
