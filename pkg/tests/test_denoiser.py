import numpy as np
import pytest

from tidm.diffusion.conditioning import Conditioning
from tidm.diffusion.denoiser import ANCHOR, Denoiser, time_embedding
from tidm.diffusion.gradcheck_suite import smallest_denoiser_config
from tidm.diffusion.trainer import init_model_params
from tidm.errors import InputError, ShapeError
from tidm.models.schemas import DenoiserConfig, TextConfig
from tidm.numerics import Rng

from .conftest import perturb


def _cond(vocab, n, anchor=None, mask=None):
    prompts = ["ident0 meets ident1 in bg0", "ident2 shakes ident0 in bg1", "ident1", "bg0"][:n]
    return Conditioning(vocab.tokenize_batch(prompts, 4), anchor, mask)


def test_default_config_stays_under_two_million_parameters():
    denoiser = Denoiser(DenoiserConfig(), TextConfig())
    count = denoiser.count_params()
    assert 1_000_000 < count < 2_000_000
    assert denoiser.config.level_sizes() == [6, 3, 3]
    assert denoiser.config.resolved_attention_levels == [1, 2]


def test_count_matches_initialised_store(denoiser):
    store = denoiser.init_params(Rng(0))
    assert store.num_scalars("unet/") == denoiser.count_params()
    assert any(name.startswith(ANCHOR + "/") for name in store.names())


def test_fresh_model_predicts_zero_noise(denoiser, vocab, latents):
    params = init_model_params(denoiser, vocab, Rng(0))
    out = denoiser.predict_noise(params, latents, 10, _cond(vocab, 4))
    np.testing.assert_array_equal(out.data, np.zeros_like(latents))


def test_output_shape_matches_latent(denoiser, params, vocab, latents):
    out = denoiser.predict_noise(params, latents, np.array([0, 5, 500, 999]), _cond(vocab, 4, latents[::-1]))
    assert out.shape == latents.shape
    assert np.isfinite(out.data).all()
    assert np.abs(out.data).max() > 0


def test_anchor_changes_prediction(denoiser, params, vocab, latents):
    plain = denoiser.predict_noise(params, latents, 100, _cond(vocab, 4)).data
    anchored = denoiser.predict_noise(params, latents, 100, _cond(vocab, 4, latents[::-1])).data
    assert not np.allclose(plain, anchored)


def test_zero_anchor_mask_equals_no_anchor(denoiser, params, vocab, latents):
    plain = denoiser.predict_noise(params, latents, 100, _cond(vocab, 4)).data
    masked = denoiser.predict_noise(params, latents, 100, _cond(vocab, 4, latents[::-1], np.zeros(4))).data
    np.testing.assert_allclose(masked, plain, atol=1e-6)


def test_batch_elements_are_independent(denoiser, params, vocab, latents):
    t = np.array([3, 300, 600, 900])
    cond = _cond(vocab, 4, latents[::-1])
    full = denoiser.predict_noise(params, latents, t, cond).data
    for i in range(4):
        single = denoiser.predict_noise(params, latents[i : i + 1], t[i : i + 1], cond.select(np.array([i]))).data
        np.testing.assert_allclose(single[0], full[i], rtol=1e-4, atol=1e-5)


def test_single_stream_has_no_anchor_path(vocab, latents):
    config, text = smallest_denoiser_config(two_stream=False)
    denoiser = Denoiser(config, text)
    params = perturb(init_model_params(denoiser, vocab, Rng(0)))
    assert not any(name.startswith(ANCHOR) for name in params.names())
    plain = denoiser.predict_noise(params, latents, 7, _cond(vocab, 4)).data
    anchored = denoiser.predict_noise(params, latents, 7, _cond(vocab, 4, latents)).data
    np.testing.assert_array_equal(plain, anchored)


def test_shape_errors(denoiser, params, vocab):
    with pytest.raises(ShapeError):
        denoiser.predict_noise(params, np.zeros((1, 4, 5, 5), dtype=np.float32), 0, _cond(vocab, 1))
    with pytest.raises(ShapeError):
        denoiser.predict_noise(params, np.zeros((2, 4, 6, 6), dtype=np.float32), 0, _cond(vocab, 1))


def test_time_embedding_rows_differ():
    emb = time_embedding(np.array([0, 1, 500]), 16)
    assert emb.shape == (3, 16)
    assert not np.allclose(emb[0], emb[1])
    assert not np.allclose(emb[1], emb[2])


def test_time_embedding_at_zero_is_sines_zero_cosines_one():
    emb = time_embedding(0, 16)
    np.testing.assert_array_equal(emb[:8], np.zeros(8))
    np.testing.assert_array_equal(emb[8:], np.ones(8))


def test_time_embedding_has_no_collisions_over_the_schedule():
    emb = time_embedding(np.arange(1000), 32)
    # every row has squared norm 16 (sin^2 + cos^2 per frequency)
    distances = np.sqrt(np.maximum(32.0 - 2.0 * emb @ emb.T, 0.0))
    np.fill_diagonal(distances, np.inf)
    assert distances.min() > 1e-3
    assert len({row.tobytes() for row in emb}) == 1000


def test_time_embedding_rejects_odd_or_tiny_dims():
    with pytest.raises(InputError):
        time_embedding(3, 15)
    with pytest.raises(InputError):
        time_embedding(3, 0)
    with pytest.raises(InputError):
        time_embedding(-1, 16)


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        DenoiserConfig(base_channels=12, norm_groups=8)
    with pytest.raises(ValueError):
        DenoiserConfig(attention_levels=[5])


def test_fresh_two_stream_matches_single_stream(vocab, latents):
    outputs = []
    for two_stream in (True, False):
        config, text = smallest_denoiser_config(two_stream=two_stream)
        denoiser = Denoiser(config, text)
        params = init_model_params(denoiser, vocab, Rng(0))
        outputs.append(denoiser.predict_noise(params, latents, 40, _cond(vocab, 4, latents)).data)
    assert outputs[0].tobytes() == outputs[1].tobytes()
