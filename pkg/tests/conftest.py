import os
from pathlib import Path

import numpy as np
import pytest

from bccb.data import SyntheticEnvConfig, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


def criteo_path() -> Path | None:
    p = os.environ.get("BCCB_CRITEO_PATH")
    return Path(p) if p and Path(p).exists() else None


@pytest.fixture(scope="session")
def small_env():
    data, tau = generate_synthetic(SyntheticEnvConfig(n_users=3000, seed=11))
    return data, tau


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(2024))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
