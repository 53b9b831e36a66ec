import numpy as np
import pytest

from tidm.diffusion.conditioning import Conditioning
from tidm.diffusion.sampler import ddim_sample, generate, guided_eps, run_ddim
from tidm.diffusion.schedule import ddim_timesteps
from tidm.errors import InputError, ShapeError
from tidm.models.schemas import AnchorMode, SamplerConfig
from tidm.numerics import Rng, no_grad


def _cond(vocab, anchor=None):
    return Conditioning(vocab.tokenize("ident0 meets ident1 in bg0", 4)[None, :], anchor)


def test_guidance_special_cases(denoiser, params, vocab, latents):
    z = latents[:1]
    cond = _cond(vocab, latents[1:2])
    eps_cond = denoiser.predict_noise(params, z, 50, cond).data
    eps_uncond = denoiser.predict_noise(params, z, 50, cond.with_null_text()).data

    np.testing.assert_array_equal(guided_eps(denoiser, params, z, 50, cond, 1.0), eps_cond)
    np.testing.assert_array_equal(guided_eps(denoiser, params, z, 50, cond, 0.0), eps_uncond)
    np.testing.assert_allclose(
        guided_eps(denoiser, params, z, 50, cond, 7.5), eps_uncond + 7.5 * (eps_cond - eps_uncond), rtol=1e-5, atol=1e-6
    )
    with pytest.raises(InputError):
        guided_eps(denoiser, params, z, 50, cond, -1.0)


def test_sampling_is_deterministic_and_per_element(denoiser, params, schedule, vocab):
    config = SamplerConfig(steps=3, guidance_scale=2.0, batch=3, seed=12)
    first = ddim_sample(denoiser, params, schedule, _cond(vocab), config)
    second = ddim_sample(denoiser, params, schedule, _cond(vocab), config)
    assert first.shape == (3, 4, 6, 6)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first[0], first[1])

    single = ddim_sample(denoiser, params, schedule, _cond(vocab), config.model_copy(update={"batch": 1}))
    np.testing.assert_array_equal(single[0], first[0])


def test_thread_pool_matches_sequential(denoiser, params, schedule, vocab):
    config = SamplerConfig(steps=2, guidance_scale=3.0, batch=3, seed=1)
    sequential = ddim_sample(denoiser, params, schedule, _cond(vocab), config)
    pooled = ddim_sample(denoiser, params, schedule, _cond(vocab), config.model_copy(update={"workers": 3}))
    np.testing.assert_array_equal(sequential, pooled)


def test_zero_strength_returns_the_anchor(denoiser, params, schedule, vocab, latents):
    anchor = latents[:1]
    config = SamplerConfig(steps=5, strength=0.0, batch=2, seed=0)
    out = ddim_sample(denoiser, params, schedule, _cond(vocab, anchor), config)
    for i in range(2):
        np.testing.assert_array_equal(out[i], anchor[0])


def test_strength_without_anchor_is_rejected(denoiser, params, schedule, vocab):
    with pytest.raises(InputError, match="anchor"):
        ddim_sample(denoiser, params, schedule, _cond(vocab), SamplerConfig(steps=2, strength=0.5, batch=1))


def test_anchor_shape_is_checked(denoiser, params, schedule, vocab):
    bad = np.zeros((1, 4, 3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        ddim_sample(denoiser, params, schedule, _cond(vocab, bad), SamplerConfig(steps=2, batch=1))


def test_anchor_modes_differ(denoiser, params, schedule, vocab, latents):
    cond = _cond(vocab, latents[:1])
    outputs = {}
    for mode in AnchorMode:
        config = SamplerConfig(steps=3, strength=0.6, batch=1, seed=2, anchor_mode=mode)
        outputs[mode] = ddim_sample(denoiser, params, schedule, cond, config)
        assert np.isfinite(outputs[mode]).all()
    assert not np.array_equal(outputs[AnchorMode.BOTH], outputs[AnchorMode.INIT])
    assert not np.array_equal(outputs[AnchorMode.BOTH], outputs[AnchorMode.STREAM])


def test_generate_decodes_images(codec, codec_params, denoiser, params, schedule, vocab, images):
    config = SamplerConfig(steps=2, batch=2, seed=3)
    plain = generate(codec, codec_params, denoiser, params, vocab, schedule, "ident1 meets ident2", None, config)
    assert plain.shape == (2, 3, 24, 24)
    assert plain.min() >= -1 and plain.max() <= 1

    anchored = generate(codec, codec_params, denoiser, params, vocab, schedule, "ident1", images[0], config)
    assert anchored.shape == (2, 3, 24, 24)
    with pytest.raises(ShapeError):
        generate(codec, codec_params, denoiser, params, vocab, schedule, "ident1", images[:2], config)


def test_zero_strength_decodes_to_the_codec_round_trip(codec, codec_params, denoiser, params, schedule, vocab, images):
    config = SamplerConfig(steps=3, strength=0.0, batch=2, seed=5)
    out = generate(codec, codec_params, denoiser, params, vocab, schedule, "ident0 meets ident1", images[0], config)
    latent = codec.encode(codec_params, images[:1])
    np.testing.assert_array_equal(out, codec.decode(codec_params, np.repeat(latent, 2, axis=0)))


@pytest.mark.slow
def test_distance_to_anchor_grows_with_strength(denoiser, params, schedule, vocab, latents):
    distances = []
    for strength in (0.0, 0.25, 0.5, 0.75, 1.0):
        per_run = []
        for index in range(latents.shape[0]):
            anchor = latents[index : index + 1]
            cond = _cond(vocab, anchor)
            for seed in range(16):
                config = SamplerConfig(steps=8, guidance_scale=2.0, strength=strength, batch=2, seed=100 + 2 * seed)
                out = ddim_sample(denoiser, params, schedule, cond, config)
                per_run.extend(np.sqrt(((out - anchor) ** 2).mean(axis=(1, 2, 3))).tolist())
        assert len(per_run) == 4 * 16 * 2
        distances.append(float(np.mean(per_run)))
    assert distances[0] == 0.0
    assert all(b >= a for a, b in zip(distances, distances[1:]))


def test_guidance_of_one_matches_conditional_sampling(denoiser, params, schedule, vocab):
    cond = _cond(vocab)
    config = SamplerConfig(steps=3, guidance_scale=1.0, batch=2, seed=4)
    guided = ddim_sample(denoiser, params, schedule, cond, config)

    def conditional(z, t):
        with no_grad():
            return denoiser.predict_noise(params, z, t, cond).data

    for i in range(2):
        z = Rng(4).derive(i).standard_normal((1, 4, 6, 6))
        expected = run_ddim(schedule, z, ddim_timesteps(schedule, 3), conditional)
        np.testing.assert_array_equal(guided[i : i + 1], expected)
