import numpy as np
import pytest
import torch

from pdet import PdetGlobalSettings
from pdet.model import Conditioning, ModelConfig, build


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end test, only runs with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def global_settings():
    settings = PdetGlobalSettings()
    yield settings
    settings.check_finite = False
    settings.exception_callback = None


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def test_config():
    return ModelConfig.preset('TEST', class_dropout_prob=0.0)


def _randomize(model, std=0.02, seed=0):
    generator = torch.Generator()
    generator.manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
    return model


@pytest.fixture
def randomize():
    return _randomize


@pytest.fixture
def random_model(test_config, float64):
    return _randomize(build(test_config, seed=0).double()).eval()


@pytest.fixture
def diff_cond():
    return Conditioning.from_names('diff', ['density'], batch=2)
