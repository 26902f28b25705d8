import os
import tempfile

# must happen before ren is imported: the logger reads REN_LOG_DIR at import
os.environ.setdefault("REN_LOG_DIR", tempfile.mkdtemp(prefix="ren-log-"))
os.environ.setdefault("REN_OUTPUT_DIR", tempfile.mkdtemp(prefix="ren-runs-"))

import numpy as np
import pytest

from ren.datasets import gen_toy
from ren.models import ModelConfig, ToySpec
from ren.networks import build_model

TINY = dict(latent_dim=2, hidden=[8, 8], feature_dim=8, feature_hidden=[8], flow_blocks=2, flow_hidden=[8])


def zero_head(mlp):
    last = mlp.layers[-1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = 0.0


def make_identity(flow):
    for block in flow.blocks:
        zero_head(block.scale_net)
        zero_head(block.translate_net)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model("one_moon", tiny_config, seed=0)


@pytest.fixture
def tiny_vae():
    return build_model("one_moon", ModelConfig(**{**TINY, "variant": "vae"}), seed=0)


@pytest.fixture
def toy_batch():
    return gen_toy(ToySpec(family="one_moon", n=16, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
