import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bbstat.synth import default_spec, make_cohorts, write_cohorts  # noqa: E402


@pytest.fixture(scope="session")
def toy_cohort():
    """4 vs 4 noisy 16x16 phantoms with lesions in the second group."""
    controls, patients, truth = make_cohorts(default_spec(16), 4, 4, 8.0, seed=11)
    data = np.stack([v.data for v in controls + patients])
    groups = np.array([1] * 4 + [2] * 4)
    return data, groups, truth


@pytest.fixture()
def toy_manifest(tmp_path):
    controls, patients, truth = make_cohorts(default_spec(16), 4, 4, 8.0, seed=11)
    path = write_cohorts(tmp_path / "data", controls, patients, truth)
    return path


def write_config(path, **kw):
    with open(path, "w") as fh:
        json.dump(kw, fh)
    return path


# acceptance criteria register one line each; printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
