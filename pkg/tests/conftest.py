import numpy as np
import pytest

from signlab import kernels

# gate verdict lines collected by test_acceptance, echoed after the run
GATE_LINES = []


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # jit compilation happens once here so timed tests measure math, not compilation
    kernels.warmup()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
