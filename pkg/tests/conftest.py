import numpy as np
import pytest

from drcmpc.experiments import ExperimentConfig, train_models


@pytest.fixture(scope="session")
def small_models():
    """Per-lookahead CKME models for Scenario I from a handful of training runs."""
    cfg = ExperimentConfig(training_runs=4, training_seed=3)
    return train_models(cfg)


@pytest.fixture(scope="session")
def campaign_models():
    """Models trained with the default campaign settings (20 training runs)."""
    return train_models(ExperimentConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
