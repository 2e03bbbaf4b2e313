import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from sparse_routing.model import ToyModelSpec
from sparse_routing.trainer import TaskSpec, TrainConfig, TrainResult, make_task, recipe, train

MAIN_SEEDS = (0, 1, 2)
# filled by test_acceptance.report(); echoed in the terminal summary
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class MainRun:
    seed: int
    result: TrainResult
    seconds: float


@pytest.fixture(scope="session")
def main_task():
    return make_task(TaskSpec())


@pytest.fixture(scope="session")
def main_spec():
    spec, _ = recipe("main", ToyModelSpec.build(), TrainConfig())
    return spec


@pytest.fixture(scope="session")
def main_runs(main_task, main_spec):
    """Main recipe (v2, top-2 of 8, global balance, alpha=1e-2), 5000 steps, three seeds."""
    _, cfg = recipe("main", ToyModelSpec.build(), TrainConfig(steps=5000))
    runs = []
    for seed in MAIN_SEEDS:
        t0 = time.perf_counter()
        res = train(main_spec, main_task, replace(cfg, seed=seed))
        runs.append(MainRun(seed, res, time.perf_counter() - t0))
    return runs
