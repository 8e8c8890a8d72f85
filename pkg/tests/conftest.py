import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trend_root(tmp_path_factory):
    return tmp_path_factory.mktemp("trend")


@pytest.fixture(scope="session")
def trend_runs(trend_root):
    """Full-length toy training for both routings over three seeds; checkpoints stay under ``trend_root``."""
    from diffmoe.experiments import trend_run
    from helpers import SEEDS

    return {(r, s): trend_run(r, s, out_dir=trend_root / f"{r}_seed{s}") for s in SEEDS for r in ("diffmoe", "tc")}
