import pytest

from ger.experiment import Dataset
from ger.model import ModelConfig
from ger.synth import generate


@pytest.fixture(scope="session")
def corpus():
    return generate(seed=0, n_train_entities=24, n_eval_entities=16)


@pytest.fixture(scope="session")
def tiny(corpus):
    return Dataset.build(corpus.train_mentions, corpus.train_entities, corpus.eval_mentions, corpus.eval_entities, max_len=32)


@pytest.fixture
def small_cfg():
    return ModelConfig(dim=8, max_len=32, enc_heads=2, hgan_layers=2, hgan_heads=2)
