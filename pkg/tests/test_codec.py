import numpy as np
import pytest

from tidm.diffusion.codec import LATENT_SCALE, BaselineCodec, LatentCodec, train_codec
from tidm.errors import InputError, ShapeError
from tidm.models.schemas import CodecConfig, TrainConfig


def test_codec_shapes_and_range(codec, codec_params, images):
    latents = codec.encode(codec_params, images)
    assert latents.shape == (4, 4, 6, 6)
    assert latents.dtype == np.float32
    decoded = codec.decode(codec_params, latents)
    assert decoded.shape == images.shape
    assert decoded.min() >= -1.0 and decoded.max() <= 1.0


def test_codec_is_deterministic_and_batch_independent(codec, codec_params, images):
    full = codec.encode(codec_params, images)
    np.testing.assert_array_equal(full, codec.encode(codec_params, images))
    np.testing.assert_allclose(full[2:3], codec.encode(codec_params, images[2:3]), atol=1e-5)


def test_codec_default_factor_and_specs():
    codec = LatentCodec(CodecConfig())
    assert codec.factor == 4
    names = [spec.name for spec in codec.specs()]
    assert LATENT_SCALE in names
    assert len(names) == len(set(names))


def test_codec_rejects_bad_shapes(codec, codec_params):
    with pytest.raises(ShapeError):
        codec.encode(codec_params, np.zeros((1, 3, 22, 22), dtype=np.float32))
    with pytest.raises(ShapeError):
        codec.encode(codec_params, np.zeros((1, 1, 24, 24), dtype=np.float32))
    with pytest.raises(ShapeError):
        codec.decode(codec_params, np.zeros((1, 3, 6, 6), dtype=np.float32))
    with pytest.raises(ShapeError):
        codec.decode(codec_params, np.zeros((1, 4, 6, 4), dtype=np.float32))


def test_codec_with_a_trained_size_rejects_other_grids(codec_params):
    sized = LatentCodec(CodecConfig(channels=[4, 8], latent_channels=4, norm_groups=2, image_size=24))
    assert sized.latent_size == 6
    assert sized.decode(codec_params, np.zeros((2, 4, 6, 6), dtype=np.float32)).shape == (2, 3, 24, 24)
    with pytest.raises(ShapeError):
        sized.decode(codec_params, np.zeros((1, 4, 5, 5), dtype=np.float32))
    with pytest.raises(ShapeError):
        sized.decode(codec_params, np.zeros((1, 4, 8, 8), dtype=np.float32))
    with pytest.raises(ShapeError):
        sized.encode(codec_params, np.zeros((1, 3, 32, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        CodecConfig(channels=[4, 8], norm_groups=2, image_size=22)


def test_codec_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(channels=[6, 8], norm_groups=4)
    assert CodecConfig(channels="8, 16").channels == [8, 16]


def test_baseline_codec_reconstructs_blockwise_constant_images():
    image = np.zeros((1, 3, 8, 8), dtype=np.float32)
    image[:, :, :4, :4] = 0.5
    image[:, 1] = -0.25
    baseline = BaselineCodec(factor=4, latent_channels=4)
    latents = baseline.encode(image)
    assert latents.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(latents[:, 3], 0)
    np.testing.assert_allclose(baseline.reconstruct(image), image, atol=1e-6)


def test_train_codec_sets_unit_latent_scale(images, tmp_path):
    config = CodecConfig(channels=[4, 8], latent_channels=4, norm_groups=2)
    train = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-3, max_steps=3, eval_batch=4)
    metrics = tmp_path / "codec.log"
    result = train_codec(images, config, train, metrics_path=str(metrics))

    assert len(result.log.step_losses) == 3
    lines = metrics.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("step=1 loss=") and lines[0].endswith("lr=0.001")
    np.testing.assert_allclose(result.latent_std, np.ones(4), atol=1e-3)
    assert result.final_mse >= 0 and result.baseline_mse >= 0
    assert np.isfinite(result.params[LATENT_SCALE]).all()


def test_train_codec_is_reproducible(images):
    config = CodecConfig(channels=[4, 8], latent_channels=4, norm_groups=2)
    train = TrainConfig(epochs=1, batch_size=2, max_steps=2, eval_batch=2, seed=5)
    first = train_codec(images, config, train)
    second = train_codec(images, config, train)
    assert first.params.equals(second.params)


def test_train_codec_rejects_empty_corpus():
    with pytest.raises(InputError):
        train_codec(np.zeros((0, 3, 24, 24), dtype=np.float32), CodecConfig(), TrainConfig())
