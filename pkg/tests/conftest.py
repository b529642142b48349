import numpy as np
import pytest

import leantuner.tensor as T
from leantuner.data import TokenDataset
from leantuner.models import GPT2Model, ModelConfig


@pytest.fixture(autouse=True)
def clean_engine_state():
    """Each test starts from seed 0, grads on, empty tape, no hooks."""
    T.set_seed(0)
    T.set_deterministic(False)
    T.TAPE.clear()
    T.set_param_access_hook(None)
    yield
    T.TAPE.clear()
    T.set_param_access_hook(None)
    T.set_deterministic(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY = dict(vocab_size=96, d_model=32, n_layers=2, n_heads=4, max_seq_len=64)


def make_toy_model(**overrides):
    cfg = ModelConfig(**{**TOY, **overrides})
    return GPT2Model(cfg)


@pytest.fixture
def toy_model():
    return make_toy_model()


def make_token_dataset(n_tokens=2000, seq_len=32, vocab=96, seed=7):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab, size=n_tokens, dtype=np.int64)
    return TokenDataset(ids, seq_len)


@pytest.fixture
def toy_dataset():
    return make_token_dataset()
