import numpy as np
import pytest

from tthlab.matcher import TrainHyper, init_matcher, train_matcher
from tthlab.synthworld import WorldParams, generate_benign_set, generate_corpus, merge_corpora

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(3, 150, 20, 40)


@pytest.fixture(scope="session")
def small_beta():
    return generate_corpus(3, 150, 20, 40, flavor="beta")


@pytest.fixture(scope="session")
def small_model(small_corpus, small_beta):
    model, _ = train_matcher(merge_corpora(small_corpus, small_beta), TrainHyper(epochs=8))
    return model


@pytest.fixture(scope="session")
def small_benign():
    return generate_benign_set(5, 6)


@pytest.fixture
def mini_models():
    """Untrained 8x8 matchers of both archs with a 2x pooling factor."""
    out = {}
    for arch in ("A", "B"):
        out[arch] = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2, arch=arch, hidden=7, seed=4)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture(scope="session")
def world_params():
    return WorldParams()
