import numpy as np
import pytest
import torch

from v2m.dataset import clip_or_pad, synthesize_dataset
from v2m.model import ModelConfig, new_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=32, n_heads=4, n_layers_enc=1, n_layers_dec=1,
                d_ff=64, d_sem=4, max_len=40, max_rel_dist=16, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_records():
    return synthesize_dataset(6, seed=11, length_s=12, d_sem=4)


@pytest.fixture(scope="session")
def small_examples(small_records):
    return [clip_or_pad(r, 16) for r in small_records]


@pytest.fixture()
def tiny_model():
    torch.set_num_threads(1)
    return new_model(tiny_config(), seed=7)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    np.random.seed(0)
