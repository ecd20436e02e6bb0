import numpy as np
import pytest

from fairavi.data import GeneratorConfig, generate_synthetic, split_group_disjoint
from fairavi.model import ModelDims

TINY_SEQ = {"language": 3, "audio": 4, "video": 3}
TINY_DIM = {"language": 3, "audio": 4, "video": 2}


def tiny_generator_config(**overrides) -> GeneratorConfig:
    # 160 samples leaves every split with enough candidates for k=5 sampling
    base = dict(n=160, seq_len=dict(TINY_SEQ), feat_dim=dict(TINY_DIM),
                skill_scale=3.0, noise_scale=0.2, seed=11)
    base.update(overrides)
    return GeneratorConfig(**base)


def tiny_dims() -> ModelDims:
    return ModelDims(input_dims=dict(TINY_DIM), gru_width=4, att_proj=3,
                     trunk_width=4, adv_hidden=3, ns_hidden=4)


@pytest.fixture
def tiny_dataset():
    samples = generate_synthetic(tiny_generator_config())
    split_group_disjoint(samples, seed=3)
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(0)
