import numpy as np
import pytest

from miavsr.model import ModelConfig, ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    return ModelConfig()


@pytest.fixture
def tiny_cfg():
    """Small enough for many forwards per test: 8x8 frames, C=8, two modules of two blocks."""
    return ModelConfig(scale=2, channels=8, window=4, heads=2, M=2, N=2, skip_interval=1)


@pytest.fixture
def tiny_params(tiny_cfg):
    return ModelParams.init(tiny_cfg)


def frames(rng, T, H, W, dtype=np.float32):
    return [rng.random((H, W, 3)).astype(dtype) for _ in range(T)]


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
