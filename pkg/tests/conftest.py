from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ttsalab.chain import build_chain
from ttsalab.model import NoiseField, assemble_instance, random_instance

settings.register_profile("ttsalab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ttsalab")


@pytest.fixture(scope="session")
def inst7():
    """The 2+2-dimensional, 10-state instance used throughout the experiments."""
    return random_instance(2, 2, 10, 7)


def decoupled_instance(dx=2, dy=2, n_states=1, b1=None, b2=None, j11=None, j22=None):
    """Zero-noise instance with identity-like blocks and no coupling."""
    j11 = np.eye(dx) if j11 is None else np.asarray(j11, float)
    j22 = np.eye(dy) if j22 is None else np.asarray(j22, float)
    chain = build_chain(np.full((n_states, n_states), 1.0 / n_states))
    return assemble_instance(j11, np.zeros((dx, dy)), np.zeros((dy, dx)), j22,
                             np.zeros(dx) if b1 is None else b1, np.zeros(dy) if b2 is None else b2,
                             chain, NoiseField.zeros(n_states, dx, dy))


@pytest.fixture
def zero_noise_instance():
    return random_instance(2, 2, 5, 3, noise_scale=0.0)


# One line per acceptance criterion, collected by tests/test_acceptance.py and
# repeated in the terminal summary so they are visible even with output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
