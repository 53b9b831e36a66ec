"""Desk-scale training runs checked against the quality thresholds; enable with TIDM_RUN_SLOW=1."""

import dataclasses

import numpy as np
import pytest

from tidm.data import make_dataset
from tidm.diffusion import (
    Denoiser,
    Vocabulary,
    finetune_dreambooth,
    loss_base,
    make_linear_schedule,
    train_base,
    train_codec,
)
from tidm.diffusion.codec import LatentCodec
from tidm.diffusion.conditioning import SPECIAL_TOKENS, TOKEN_EMBEDDING, Conditioning
from tidm.diffusion.trainer import init_model_params
from tidm.evaluation import AnchorCase, EvalPrompt, Evaluator, reconstruction_psnr, train_probe_classifier
from tidm.models.schemas import (
    CodecConfig,
    DatasetConfig,
    DenoiserConfig,
    DreamboothConfig,
    ProbeConfig,
    SamplerConfig,
    TextConfig,
    TrainConfig,
)
from tidm.numerics import Rng, no_grad

pytestmark = pytest.mark.slow

N_IDENTITIES = 4
N_BACKGROUNDS = 2
IMAGE_SIZE = 24

# thresholds measured on this corpus with seed 0
MIN_CODEC_PSNR = 28.0
MAX_CODEC_TO_BASELINE = 0.7
MIN_PROBE_ACCURACY = 0.95
CHANCE_MARGIN = 0.05
MIN_GENERATED_IDENTITY_ACCURACY = 0.7
MAX_EMBEDDING_COSINE = 0.99


@pytest.fixture(scope="module")
def corpus():
    config = DatasetConfig(
        n_scenes=800,
        n_identities=N_IDENTITIES,
        n_backgrounds=N_BACKGROUNDS,
        image_size=IMAGE_SIZE,
        n_probe_scenes=1000,
        n_instances=4,
    )
    return make_dataset(config, seed=0)


@pytest.fixture(scope="module")
def trained_codec(corpus):
    config = CodecConfig(channels=[16, 32], latent_channels=4, norm_groups=8, image_size=IMAGE_SIZE)
    train = TrainConfig(epochs=15, batch_size=32, learning_rate=2e-3, seed=0, eval_batch=128)
    result = train_codec(corpus.train.images, config, train)
    return LatentCodec(config), result


@pytest.fixture(scope="module")
def probe_model(corpus):
    config = ProbeConfig(channels=[16, 32], epochs=6, batch_size=64, seed=0)
    return train_probe_classifier(corpus.probe, config, N_IDENTITIES, N_BACKGROUNDS)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.for_grammar(N_IDENTITIES, N_BACKGROUNDS)


@pytest.fixture(scope="module")
def schedule():
    return make_linear_schedule()


@pytest.fixture(scope="module")
def denoiser():
    config = DenoiserConfig(
        latent_channels=4,
        latent_size=IMAGE_SIZE // 4,
        base_channels=16,
        channel_mults=[1, 2],
        blocks_per_level=1,
        attention_levels=[1],
        time_embed_dim=32,
        context_dim=16,
        norm_groups=4,
    )
    return Denoiser(config, TextConfig(seq_len=8, embed_dim=16))


@pytest.fixture(scope="module")
def base_run(corpus, trained_codec, denoiser, vocab, schedule):
    codec, codec_result = trained_codec
    latents = codec.encode(codec_result.params, corpus.train.images)
    token_ids = vocab.tokenize_batch(corpus.train.captions, denoiser.text.seq_len)
    config = TrainConfig(epochs=30, batch_size=32, learning_rate=1e-3, seed=0, eval_batch=128)
    result = train_base(denoiser, latents, token_ids, vocab, schedule, config)
    return latents, token_ids, config, result


def _evaluator(trained_codec, denoiser, params, vocab, schedule, probe_model, steps=20):
    codec, codec_result = trained_codec
    probe, probe_result = probe_model
    sampler = SamplerConfig(steps=steps, guidance_scale=5.0, batch=4, seed=0)
    return Evaluator(
        codec, codec_result.params, denoiser, params, vocab, schedule, probe, probe_result.params, sampler
    )


def _class_prompts(identities, count, seed):
    rng = Rng(seed)
    prompts = []
    for _ in range(count):
        a, b, bg = rng.integers(1 << 30, 3).tolist()
        left = identities[a % len(identities)]
        others = [i for i in identities if i != left]
        right = others[b % len(others)]
        prompts.append(EvalPrompt(f"ident{left} meets ident{right} in bg{bg % N_BACKGROUNDS}", left, right))
    return prompts


def _slot_accuracy(evaluator, prompts, per_prompt, seed):
    hits = {"left": [], "right": []}
    for i, item in enumerate(prompts):
        images = evaluator.sample(item.prompt, None, per_prompt, seed + i)
        predicted = evaluator.probe.predict(evaluator.probe_params, images)
        hits["left"].extend((predicted["left"] == item.left).tolist())
        hits["right"].extend((predicted["right"] == item.right).tolist())
    return float(np.mean(hits["left"])), float(np.mean(hits["right"]))


def _seen(corpus):
    held_out = corpus.instances.specs[0].identity_a
    return [i for i in range(N_IDENTITIES) if i != held_out], held_out


# ------------------------------------------------------------------
# Codec and identity classifier
# ------------------------------------------------------------------


def test_codec_round_trip_quality(corpus, trained_codec):
    codec, result = trained_codec
    held_out_renders = corpus.probe.images[:256]
    psnr = reconstruction_psnr(held_out_renders, codec.reconstruct(result.params, held_out_renders))
    assert psnr >= MIN_CODEC_PSNR
    assert result.final_mse <= MAX_CODEC_TO_BASELINE * result.baseline_mse
    np.testing.assert_allclose(result.latent_std, 1.0, rtol=0.05)


def test_identity_classifier_separates_identities_and_backgrounds(probe_model):
    _, result = probe_model
    assert result.holdout_accuracy["left"] >= MIN_PROBE_ACCURACY
    assert result.holdout_accuracy["right"] >= MIN_PROBE_ACCURACY
    assert result.holdout_accuracy["background"] >= MIN_PROBE_ACCURACY


def test_identity_classifier_on_shuffled_labels_is_at_chance(corpus):
    dataset = corpus.probe
    order = Rng(17).permutation(len(dataset))
    shuffled = dataclasses.replace(dataset, specs=[dataset.specs[i] for i in order], captions=[])
    _, result = train_probe_classifier(
        shuffled, ProbeConfig(channels=[16, 32], epochs=6, batch_size=64, seed=0), N_IDENTITIES, N_BACKGROUNDS
    )
    assert result.identity_accuracy == pytest.approx(1.0 / N_IDENTITIES, abs=CHANCE_MARGIN)


# ------------------------------------------------------------------
# Base model
# ------------------------------------------------------------------


def test_base_training_halves_the_loss(denoiser, vocab, schedule, base_run):
    latents, token_ids, config, result = base_run
    idx = np.arange(256)
    cond = Conditioning(token_ids[idx], latents[idx], np.ones(idx.size, dtype=np.float32))
    initial_params = init_model_params(denoiser, vocab, Rng(config.seed))
    with no_grad():
        initial = loss_base(denoiser, initial_params, schedule, latents[idx], cond, Rng(99)).item()
        final = loss_base(denoiser, result.params, schedule, latents[idx], cond, Rng(99)).item()
    assert initial == pytest.approx(1.0, rel=0.1)
    assert final <= 0.5 * initial
    assert result.log.eval_losses[-1] < result.log.eval_losses[0]


def test_identity_tokens_stay_apart(vocab, base_run):
    table = base_run[3].params[TOKEN_EMBEDDING].astype(np.float64)
    rows = table[[vocab.id(f"ident{i}") for i in range(N_IDENTITIES)]]
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    cosine = unit @ unit.T
    np.fill_diagonal(cosine, -1.0)
    assert cosine.max() < MAX_EMBEDDING_COSINE


def test_generations_show_the_prompted_identities(
    corpus, trained_codec, denoiser, vocab, schedule, probe_model, base_run
):
    seen, _ = _seen(corpus)
    evaluator = _evaluator(trained_codec, denoiser, base_run[3].params, vocab, schedule, probe_model)
    left, right = _slot_accuracy(evaluator, _class_prompts(seen, 6, seed=5), 4, seed=300)
    assert left >= MIN_GENERATED_IDENTITY_ACCURACY
    assert right >= MIN_GENERATED_IDENTITY_ACCURACY


def test_anchor_lowers_background_spread(corpus, trained_codec, denoiser, vocab, schedule, probe_model, base_run):
    evaluator = _evaluator(trained_codec, denoiser, base_run[3].params, vocab, schedule, probe_model)
    probe_split = corpus.probe
    cases = [AnchorCase(probe_split.captions[i], probe_split.images[i], probe_split.masks[i]) for i in range(8)]
    with_anchor, without = evaluator.anchor_consistency(cases, 4, seed=700)
    wins = sum(a < b for a, b in zip(with_anchor, without))
    # one-sided sign test over 8 pairs: 7 or more wins gives p < 0.05
    assert wins >= 7
    assert np.mean(with_anchor) < np.mean(without)


# ------------------------------------------------------------------
# Fine-tuning
# ------------------------------------------------------------------


def _finetune(corpus, trained_codec, denoiser, vocab, schedule, base_params, lambda_prior, seed):
    codec, codec_result = trained_codec
    config = DreamboothConfig(
        lambda_prior=lambda_prior, prior_set_size=16, prior_steps=20, steps=120, learning_rate=5e-4, seed=seed
    )
    return finetune_dreambooth(
        denoiser,
        base_params,
        codec,
        codec_result.params,
        vocab,
        schedule,
        corpus.instances.images,
        config,
        instance_captions=corpus.instances.captions,
    )


def test_prior_preservation_limits_class_drift(corpus, trained_codec, denoiser, vocab, schedule, probe_model, base_run):
    seen, held_out = _seen(corpus)
    base_params = base_run[3].params
    class_prompts = _class_prompts(seen, 4, seed=11)
    base_evaluator = _evaluator(trained_codec, denoiser, base_params, vocab, schedule, probe_model)
    before = np.mean(_slot_accuracy(base_evaluator, class_prompts, 4, 900))

    drift = {1.0: [], 0.0: []}
    for seed in (0, 1, 2):
        for lambda_prior in (1.0, 0.0):
            result = _finetune(corpus, trained_codec, denoiser, vocab, schedule, base_params, lambda_prior, seed)
            evaluator = _evaluator(trained_codec, denoiser, result.params, result.vocab, schedule, probe_model)
            placeholder_prompts = [
                EvalPrompt(f"sks meets ident{item.right} in bg{i % N_BACKGROUNDS}", held_out, item.right)
                for i, item in enumerate(class_prompts)
            ]
            subject, _ = _slot_accuracy(evaluator, placeholder_prompts, 4, 1_000)
            assert subject >= MIN_GENERATED_IDENTITY_ACCURACY, (seed, lambda_prior)
            after = np.mean(_slot_accuracy(evaluator, class_prompts, 4, 900))
            drift[lambda_prior].append(before - after)

            table = result.params[TOKEN_EMBEDDING].astype(np.float64)
            existing = np.linalg.norm(table[len(SPECIAL_TOKENS) : len(vocab)], axis=1).mean()
            norm = np.linalg.norm(table[result.vocab.id("sks")])
            assert existing / 2 <= norm <= 2 * existing

    assert np.mean(drift[1.0]) < np.mean(drift[0.0])
