import numpy as np
import pytest

from condreg.data import SynthSpec, generate
from condreg.evaluation import ProbeConfig, evaluate
from condreg.training import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_split():
    return generate(SynthSpec())


@pytest.fixture(scope="session")
def ce_run(default_split):
    return train(default_split, TrainConfig(measure="none", lam=0.0, seed=7))


@pytest.fixture(scope="session")
def gw_run(default_split):
    return train(default_split, TrainConfig(measure="gaussian_w", lam=1.0, seed=7))


@pytest.fixture(scope="session")
def ce_report(ce_run, default_split):
    return evaluate(ce_run.params, default_split.test, ProbeConfig(seed=7))


@pytest.fixture(scope="session")
def gw_report(gw_run, default_split):
    return evaluate(gw_run.params, default_split.test, ProbeConfig(seed=7))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
