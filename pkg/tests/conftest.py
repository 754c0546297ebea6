import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from disorder_switch import model, solver  # noqa: E402


@pytest.fixture(scope="session")
def baseline():
    return model.ModelParams()


@pytest.fixture(scope="session")
def baseline_dc(baseline):
    return model.derive(baseline)


@pytest.fixture(scope="session")
def solved(baseline):
    return {f: solver.solve_boundaries(f, None, baseline) for f in ("f1", "f2")}
