import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdfadv.experiments import TrialConfig, make_trial  # noqa: E402
from sdfadv.sdf import AnalyticFamily  # noqa: E402


@pytest.fixture(scope="session")
def car():
    return AnalyticFamily.car()


@pytest.fixture(scope="session")
def unit_sphere():
    return AnalyticFamily.sphere(1.0)


@pytest.fixture(scope="session")
def trial(car):
    """One feasible placement in a cluttered synthetic scene (scene seed 1)."""
    return make_trial(1, car, np.zeros(car.d_z), TrialConfig())


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
