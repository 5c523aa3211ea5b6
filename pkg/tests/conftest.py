import numpy as np
import pytest

from ew import autograd as ag
from ew.fusion import Extractor3D, FusionNet, TextEmbedding
from ew.generator import GeneratorConfig, GeneratorNet


def tiny_config(**overrides) -> GeneratorConfig:
    base = dict(channels=2, height=4, width=4, patch=2, model_dim=16, n_heads=2,
                n_layers=2, denoise_steps=2, text_dim=8)
    base.update(overrides)
    return GeneratorConfig(**base)


@pytest.fixture
def net_cfg() -> GeneratorConfig:
    return tiny_config()


@pytest.fixture
def net(net_cfg) -> GeneratorNet:
    # random output projection so gradients reach every layer
    return GeneratorNet(net_cfg, np.random.default_rng(11), zero_out_proj=False)


@pytest.fixture
def fusion_parts(net_cfg):
    rng = np.random.default_rng(5)
    extractor = Extractor3D(net_cfg.channels, feature_channels=3, seed=7)
    fusion = FusionNet(3, net_cfg.text_dim, n_tokens=4, temporal_extent=9, rng=rng)
    e_text = TextEmbedding(ag.constant(rng.standard_normal((4, net_cfg.text_dim))))
    return extractor, fusion, e_text
