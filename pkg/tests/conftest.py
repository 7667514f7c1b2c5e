import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from esfp.hpstm import HPSTM, ModelConfig
from esfp.kinematics import chain_skeleton, default_skeleton

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

TINY = ModelConfig(window=5, joints=4, d_model=16, heads=2, encoder_layers=1, decoder_layers=1, ff_width=32,
                   dropout=0.0)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture
def chain4():
    return chain_skeleton([0.0, 0.3, 0.25, 0.2])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, covariance=True, window=5, jitter=0.05):
    """Small model with weights nudged off the symmetric initial point."""
    cfg = ModelConfig(**{**TINY.__dict__, "covariance": covariance, "window": window})
    model = HPSTM(cfg, chain_skeleton([0.0, 0.3, 0.25, 0.2]), seed=seed)
    r = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p.value += r.normal(0.0, jitter, p.value.shape)
    return model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
