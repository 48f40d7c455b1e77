import numpy as np
import pytest
import torch

from relaydiff.schedules import RelayConfig, make_noise_schedule

torch.set_num_threads(1)

# pass/fail lines collected by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return make_noise_schedule("linear", 1000, 1.0)


@pytest.fixture(scope="session")
def cos_sched():
    return make_noise_schedule("cosine", 1000, 0.1)


@pytest.fixture(scope="session")
def relay():
    return RelayConfig(500)
