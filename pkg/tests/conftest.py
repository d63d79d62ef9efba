import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xlslu.corpus import GeneratorSpec, generate_synthetic  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def small_data():
    spec = GeneratorSpec(n_train=120, n_dev=30, n_test=30)
    return generate_synthetic(spec, seed=3)


@pytest.fixture(scope="session")
def desk_data():
    return generate_synthetic(GeneratorSpec(), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
