import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=20,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from rotlab.toymodel import ModelConfig, SyntheticCorpus, build_model, pretrain  # noqa: E402

TINY = ModelConfig(L=2, D=32, n_heads=2, D_ffn=64, vocab=16, T_ctx=16, seed=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_corpus():
    return SyntheticCorpus.generate(TINY.vocab, seed=0, n_train=8192, n_eval=1024)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """A briefly trained tiny model (weights away from their initialization)."""
    return pretrain(build_model(TINY), tiny_corpus, steps=40, lr=0.1, batch_size=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
