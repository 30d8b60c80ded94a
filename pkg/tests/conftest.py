import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_world():
    from panoenv.world import make_world

    return make_world(7, 12, episodes=10)


@pytest.fixture(scope="session")
def tiny_generator():
    from panoenv.diffusion import make_generator

    return make_generator(width=16, blocks=1, T=10, seed=3)


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """The full CLI pipeline executed twice in separate roots: [(results, files), ...]."""
    import cli_pipeline

    out = []
    for k in range(2):
        root = tmp_path_factory.mktemp(f"cli{k}")
        results = cli_pipeline.run(root)
        out.append((results, cli_pipeline.snapshot(root)))
    return out
