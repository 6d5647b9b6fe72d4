import numpy as np
import pytest


class FixedNormal:
    """Stands in for a Generator: ``standard_normal`` returns queued arrays in order."""

    def __init__(self, *draws):
        self.draws = [np.asarray(d, dtype=float) for d in draws]

    def standard_normal(self, shape=None):
        z = self.draws.pop(0)
        return z.reshape(shape) if shape is not None else z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running acceptance criteria")


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
