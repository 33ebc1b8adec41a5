import numpy as np
import pytest

from sssae.data import load_collapse_map
from sssae.model import ModelShape, init_params

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cmap():
    return load_collapse_map()


@pytest.fixture
def small_params():
    """Random 8-16-4 model with biases moved off zero."""
    rng = np.random.default_rng(1234)
    params = init_params(ModelShape(8, 16, 4), 3)
    for a in params.arrays():
        a += rng.normal(0.0, 0.1, a.shape)
    return params
