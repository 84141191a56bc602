import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trust_ssm.bench import SourceConfig, build_source
from trust_ssm.checkpoint import ModelConfig
from trust_ssm.model import MicroVMamba

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(embed_dim=8, state_dim=3)


@pytest.fixture
def tiny_model(tiny_config):
    return MicroVMamba(tiny_config, seed=7)


class SourceModels:
    """Trains one source checkpoint per seed on first use and remembers the cost."""

    def __init__(self):
        self.checkpoints = {}
        self.train_seconds = {}

    def __call__(self, seed: int):
        if seed not in self.checkpoints:
            t0 = time.perf_counter()
            self.checkpoints[seed] = build_source(SourceConfig(seed=seed))
            self.train_seconds[seed] = time.perf_counter() - t0
        return self.checkpoints[seed]


@pytest.fixture(scope="session")
def source_models():
    return SourceModels()


@pytest.fixture(scope="session")
def source_checkpoint(source_models):
    return source_models(0)
