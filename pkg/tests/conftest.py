import sys
import warnings

import numpy as np
import pytest

from stokes_els import PRESETS, StokesOperator, panelize, refine


@pytest.fixture(autouse=True)
def _quiet_close_targets():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*closer than.*panel lengths")
        yield


@pytest.fixture(scope="session")
def circle10():
    return panelize(PRESETS["circle"], 10)


@pytest.fixture(scope="session")
def small_refined(circle10):
    """Unit circle with 10 panels, one of them split in four."""
    d_new, plan = refine(circle10, [0], 4)
    return circle10, d_new, plan, StokesOperator(circle10), StokesOperator(d_new)


def interior_targets(n=20, radius=0.5, seed=0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance-criterion lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
