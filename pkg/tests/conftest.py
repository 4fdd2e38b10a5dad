import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from latentmorph.vae import ModelConfig, VAENet

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


TINY = ModelConfig(input_size=8, latent_dim=4, encoder_channels=(2, 3), mlp_hidden=(5,))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_net():
    return VAENet(TINY, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
