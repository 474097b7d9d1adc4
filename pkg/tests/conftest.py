import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402
from mcbandit.sim import (  # noqa: E402
    DESK_HORIZON,
    DESK_RECIPE,
    desk_truth,
    error_decay_study,
    normality_study,
    benchmark_forms,
    regret_scaling_study,
)

# Seeds for the statistical studies, fixed before any study was run.
STUDY_SEED = 2024
TRUTH_SEED = 1
WORKERS = max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)

REGRET_HORIZONS = (10000, 15000, 20000, 25000, 30000, 35000, 40000)


@pytest.fixture(scope="session")
def desk():
    truth = desk_truth(TRUTH_SEED)
    return truth, DESK_RECIPE.config(truth, DESK_HORIZON, STUDY_SEED)


@pytest.fixture(scope="session")
def desk_normality(desk):
    truth, config = desk
    return normality_study(truth, config, benchmark_forms(60, 60), trials=300, seed=STUDY_SEED,
                           workers=WORKERS)


@pytest.fixture(scope="session")
def desk_regret(desk):
    truth, _ = desk
    return regret_scaling_study(truth, DESK_RECIPE, REGRET_HORIZONS, trials=30, seed=STUDY_SEED,
                                workers=WORKERS)


@pytest.fixture(scope="session")
def desk_decay(desk):
    truth, _ = desk
    return error_decay_study(truth, DESK_RECIPE, 5000, 4, trials=30, seed=STUDY_SEED, workers=WORKERS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda ln: int(ln.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
