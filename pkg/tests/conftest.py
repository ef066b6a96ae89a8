import time

import numpy as np
import pytest

from flowsolve.reflow_train import (
    IndependentCoupling,
    TrainConfig,
    default_source,
    default_target,
    reflow,
    train_rectified_flow,
)
from flowsolve.tinynet import MLPField

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


@pytest.fixture(scope="session")
def mixtures():
    return default_source(), default_target()


# wall-clock seconds spent training each shared model
TRAIN_SECONDS = {}


@pytest.fixture(scope="session")
def trained_1rf(mixtures):
    src, tgt = mixtures
    t0 = time.perf_counter()
    res = train_rectified_flow(TrainConfig(seed=1024), IndependentCoupling(src, tgt))
    TRAIN_SECONDS["1rf"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def trained_2rf(trained_1rf, mixtures):
    t0 = time.perf_counter()
    coupling, result = reflow(trained_1rf.params, TrainConfig(seed=1025), mixtures[0])
    TRAIN_SECONDS["2rf"] = time.perf_counter() - t0
    return coupling, result


@pytest.fixture
def train_seconds():
    return TRAIN_SECONDS


@pytest.fixture(scope="session")
def field_1rf(trained_1rf):
    return MLPField(trained_1rf.params)


@pytest.fixture(scope="session")
def field_2rf(trained_2rf):
    return MLPField(trained_2rf[1].params)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
