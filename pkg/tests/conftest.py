import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mremq.model import ModelConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(layers=2, d_model=8, heads=2, d_ff=16, vocab=16, max_seq_len=6, num_classes=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tokens(tiny_cfg, rng):
    return rng.integers(0, tiny_cfg.vocab, size=(4, tiny_cfg.max_seq_len))
