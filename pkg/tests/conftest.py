from __future__ import annotations

import numpy as np
import pytest

from tafs_grpo.flow import VelocityField


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return VelocityField(dim=2, num_conditions=3, hidden=(8,), time_dim=4, cond_dim=3, seed=7)


def make_tiny(seed: int = 0, hidden=(8,), num_conditions: int = 3) -> VelocityField:
    return VelocityField(dim=2, num_conditions=num_conditions, hidden=hidden, time_dim=4, cond_dim=3, seed=seed)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
