import sys

import numpy as np
import pytest

from socialnav.data import collect_episodes
from socialnav.world_model import WorldModel


@pytest.fixture(scope="session")
def small_dataset():
    return collect_episodes(12, 0.5, seed=3)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    """A briefly trained, narrow world model: enough for contract tests, not for quality."""
    return WorldModel(hidden_channels=8, attention_heads=2, steps=30, batch_size=32,
                      random_state=0).fit(small_dataset.arrays())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in acceptance.RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
