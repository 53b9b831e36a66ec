import os

import numpy as np
import pytest

from tidm.diffusion import Denoiser, LatentCodec, Vocabulary, make_linear_schedule
from tidm.diffusion.gradcheck_suite import smallest_denoiser_config
from tidm.diffusion.trainer import init_model_params
from tidm.models.schemas import CodecConfig, DatasetConfig
from tidm.numerics import ParamStore, Rng


def pytest_collection_modifyitems(config, items):
    if os.getenv("TIDM_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set TIDM_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def perturb(params: ParamStore, seed: int = 0, amount: float = 0.1) -> ParamStore:
    """Jitter every entry so zero-initialised output layers produce non-zero predictions."""
    rng = Rng(seed)
    out = params.copy()
    for name, value in params.items():
        out[name] = (value + amount * rng.standard_normal(value.shape)).astype(np.float32)
    return out


@pytest.fixture
def vocab():
    return Vocabulary.for_grammar(3, 2)


@pytest.fixture
def schedule():
    return make_linear_schedule()


@pytest.fixture
def denoiser():
    config, text = smallest_denoiser_config()
    return Denoiser(config, text)


@pytest.fixture
def params(denoiser, vocab):
    return perturb(init_model_params(denoiser, vocab, Rng(0)), seed=1)


@pytest.fixture
def codec():
    # factor 4: 24x24 images map to the 6x6 latents of the smallest denoiser
    return LatentCodec(CodecConfig(channels=[4, 8], latent_channels=4, norm_groups=2))


@pytest.fixture
def codec_params(codec):
    return codec.init_params(Rng(2))


@pytest.fixture
def latents():
    return Rng(3).standard_normal((4, 4, 6, 6)).astype(np.float32)


@pytest.fixture
def images():
    return np.tanh(Rng(4).standard_normal((4, 3, 24, 24))).astype(np.float32)


@pytest.fixture
def tiny_data_config():
    return DatasetConfig(
        n_scenes=12,
        n_identities=3,
        n_backgrounds=2,
        image_size=24,
        n_probe_scenes=10,
        n_instances=3,
    )
