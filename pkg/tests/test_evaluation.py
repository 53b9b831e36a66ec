import numpy as np
import pytest

from tidm.data import make_dataset
from tidm.errors import InputError, ShapeError
from tidm.evaluation import (
    AnchorCase,
    EvalPrompt,
    Evaluator,
    background_consistency,
    blend_rate,
    evaluate,
    identity_accuracy,
    reconstruction_psnr,
    train_probe_classifier,
)
from tidm.models.schemas import EvalConfig, ProbeConfig, SamplerConfig


def _mask(size=8):
    mask = np.ones((size, size), dtype=bool)
    mask[2:5, 2:5] = False
    return mask


def test_background_consistency_ignores_foreground():
    base = np.zeros((1, 3, 8, 8), dtype=np.float32)
    batch = np.repeat(base, 3, axis=0)
    assert background_consistency(batch, _mask()) == 0.0

    batch[1, :, 3, 3] = 1.0
    batch[2, :, 2:5, 2:5] = -0.7
    assert background_consistency(batch, _mask()) == 0.0


def test_background_consistency_of_a_constant_shift():
    batch = np.zeros((2, 3, 8, 8), dtype=np.float32)
    batch[1] += 0.25
    expected = 0.25 * np.sqrt(3)
    assert background_consistency(batch, _mask()) == pytest.approx(expected)
    assert background_consistency(batch, np.stack([_mask(), _mask()])) == pytest.approx(expected)


def test_background_consistency_averages_pixel_distances_over_pairs():
    batch = np.zeros((3, 3, 8, 8), dtype=np.float32)
    batch[1, 0] = 0.3
    batch[1, 1] = 0.4
    # pairs (0,1) and (1,2) are 0.5 apart per pixel, (0,2) are identical
    assert background_consistency(batch, _mask()) == pytest.approx(1.0 / 3.0)


def test_background_consistency_rejects_bad_input():
    with pytest.raises(InputError):
        background_consistency(np.zeros((0, 3, 8, 8)), _mask())
    with pytest.raises(ShapeError):
        background_consistency(np.zeros((2, 3, 8, 8)), np.ones((4, 4), dtype=bool))


def test_reconstruction_psnr():
    images = np.zeros((2, 3, 4, 4), dtype=np.float32)
    assert reconstruction_psnr(images, images) == 100.0
    assert reconstruction_psnr(images, images + 0.1) == pytest.approx(26.0206, abs=1e-3)
    with pytest.raises(ShapeError):
        reconstruction_psnr(images, images[:1])


def test_identity_accuracy_and_blend_rate():
    predicted = {"left": np.array([0, 1, 2, 2]), "right": np.array([1, 1, 0, 2])}
    left = np.array([0, 1, 2, 0])
    right = np.array([1, 0, 0, 2])
    assert identity_accuracy(predicted, left, right) == pytest.approx(6 / 8)
    assert blend_rate(predicted, left, right) == pytest.approx(2 / 4)
    assert blend_rate(predicted, left, left) == 0.0
    with pytest.raises(InputError):
        identity_accuracy({"left": np.zeros(0), "right": np.zeros(0)}, left[:0], right[:0])


def _probe_config():
    return ProbeConfig(channels=[4, 8], epochs=1, batch_size=4, seed=1)


def test_probe_training_reports_holdout_accuracy(tiny_data_config):
    dataset = make_dataset(tiny_data_config, seed=0).probe
    probe, result = train_probe_classifier(dataset, _probe_config(), 3, 2)
    assert set(result.holdout_accuracy) == {"left", "right", "background"}
    assert 0.0 <= result.identity_accuracy <= 1.0
    assert len(result.log.epoch_losses) == 1
    predicted = probe.predict(result.params, dataset.images[:3])
    assert predicted["left"].shape == (3,)
    assert predicted["left"].max() < 3 and predicted["background"].max() < 2

    _, again = train_probe_classifier(dataset, _probe_config(), 3, 2)
    assert again.params.equals(result.params)


def test_probe_rejects_tiny_dataset(tiny_data_config):
    dataset = make_dataset(tiny_data_config, seed=0).probe
    dataset.specs = dataset.specs[:1]
    with pytest.raises(InputError):
        train_probe_classifier(dataset, _probe_config(), 3, 2)


def test_evaluate_produces_a_bounded_report(codec, codec_params, denoiser, params, schedule, vocab, tiny_data_config):
    bundle = make_dataset(tiny_data_config, seed=0)
    probe, probe_result = train_probe_classifier(bundle.probe, _probe_config(), 3, 2)
    evaluator = Evaluator(
        codec,
        codec_params,
        denoiser,
        params,
        vocab,
        schedule,
        probe,
        probe_result.params,
        SamplerConfig(steps=2, batch=2, seed=0),
    )
    prompts = [EvalPrompt("ident0 meets ident1 in bg0", 0, 1)]
    anchors = [AnchorCase("ident0 meets ident1 in bg0", bundle.train.images[0], bundle.train.masks[0])]
    report = evaluate(evaluator, prompts, [], anchors, bundle.train.images[:2], EvalConfig(images_per_prompt=2))

    assert report.n_identity_samples == 2
    assert report.class_accuracy == report.identity_accuracy
    assert report.n_consistency_batches == 1
    assert report.background_consistency >= 0
    assert report.background_consistency_no_anchor >= 0
    assert 0 <= report.anchor_consistency_wins <= 1
    assert np.isfinite(report.reconstruction_psnr)

    config = EvalConfig(images_per_prompt=2)
    with_anchor, without = evaluator.anchor_consistency(anchors, 2, config.seed + 20_000)
    assert report.background_consistency == pytest.approx(with_anchor[0])
    assert report.background_consistency_no_anchor == pytest.approx(without[0])
    assert "background_consistency_no_anchor" in report.model_dump_json()

    with pytest.raises(InputError):
        evaluate(evaluator, [], [], anchors, bundle.train.images[:2], EvalConfig())
