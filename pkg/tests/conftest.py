import numpy as np
import pytest

from core.environment import EnvSettings, MagneticCapsuleEnv, RandomizationSpec, RewardWeights
from core.physics import CapsuleMagnet, CoilArrayConfig, FossenParams, IntegratorSettings
from core.sac import SacConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def coils():
    return CoilArrayConfig()


@pytest.fixture
def magnet():
    return CapsuleMagnet()


@pytest.fixture
def params():
    return FossenParams()


@pytest.fixture
def make_env(coils, magnet, params):
    """Factory for small deterministic environments."""
    def build(randomization=None, seed=0, **settings):
        return MagneticCapsuleEnv(coils, magnet, params, IntegratorSettings(), RewardWeights(),
                                  randomization or RandomizationSpec(), EnvSettings(**settings), seed=seed)
    return build


@pytest.fixture
def tiny_sac():
    """Miniature SAC configuration for fast unit tests."""
    return SacConfig(batch_size=8, warmup_steps=16, buffer_capacity=256, hidden_sizes=(8, 8),
                     eval_interval=32, eval_episodes=1, finetune_warmup=4, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
