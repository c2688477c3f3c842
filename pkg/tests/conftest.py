import numpy as np
import pytest

from egnnlab.egnn import EgnnConfig, init_model
from egnnlab.graphdata import batch_graphs, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_graphs():
    return generate_synthetic_dataset(6, 3, 7, 2.5, min_separation=0.9, seed=3)


@pytest.fixture
def small_batch(small_graphs):
    return batch_graphs(small_graphs)


@pytest.fixture
def small_model():
    return init_model(EgnnConfig(depth=2, width=8, seed=1))


def random_rotation(rng, reflect=False):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if reflect:
        q = q @ np.diag([1.0, 1.0, -1.0])
    return q


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
