import numpy as np
import pytest

from mkidqubit.config import Dataset, RunConfig
from mkidqubit.geometry import StackGeometry
from mkidqubit.radiation import SourceConfig

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def stack():
    return StackGeometry.build()


@pytest.fixture(scope="session")
def source():
    return SourceConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def busy_config(seed=7, duration_s=60.0, kind="t1", **source_kw):
    """Short dataset with inflated rates so a minute of data has dozens of captures."""
    src = SourceConfig(**{"muon_flux": 0.3, "gamma_rate_per_chip": 0.2, **source_kw})
    return RunConfig(seed=seed, datasets=(Dataset(kind, kind, duration_s),), source=src)
