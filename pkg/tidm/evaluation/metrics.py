"""Automated proxies for subject fidelity and background consistency."""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InputError, ShapeError
from ..models.schemas import EvalConfig, EvalReport, SamplerConfig
from ..numerics import ParamStore
from ..diffusion.codec import LatentCodec
from ..diffusion.conditioning import Vocabulary
from ..diffusion.denoiser import Denoiser
from ..diffusion.sampler import generate
from ..diffusion.schedule import NoiseSchedule
from .probe import ProbeClassifier

logger = logging.getLogger(__name__)

# peak-to-peak of the [-1, 1] image range
PSNR_PEAK = 2.0
PSNR_CAP = 100.0


def background_consistency(images: np.ndarray, masks: np.ndarray) -> float:
    """Mean pairwise L2 distance on shared background pixels.

    Each pixel contributes the Euclidean distance between its RGB values in the two
    images; that distance is averaged over the pixels both masks keep, then over all
    image pairs. ``masks`` is one (H, W) mask for the whole batch or one per image.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError(f"background_consistency: expected a non-empty (B, 3, H, W) batch, got {images.shape}")
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (images.shape[0],) + masks.shape)
    if masks.shape != (images.shape[0],) + images.shape[2:]:
        raise ShapeError(f"background_consistency: masks {masks.shape} do not match images {images.shape}")
    scores = []
    for i, j in combinations(range(images.shape[0]), 2):
        shared = masks[i] & masks[j]
        if not shared.any():
            continue
        diff = (images[i] - images[j])[:, shared]
        scores.append(float(np.mean(np.linalg.norm(diff, axis=0))))
    return float(np.mean(scores)) if scores else 0.0


def reconstruction_psnr(images: np.ndarray, reconstructions: np.ndarray) -> float:
    images = np.asarray(images, dtype=np.float64)
    reconstructions = np.asarray(reconstructions, dtype=np.float64)
    if images.shape != reconstructions.shape or images.size == 0:
        raise ShapeError(f"reconstruction_psnr: shapes {images.shape} and {reconstructions.shape} differ or are empty")
    err = float(np.mean((images - reconstructions) ** 2))
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(PSNR_PEAK**2 / err))


def identity_accuracy(predicted: Dict[str, np.ndarray], expected_left: np.ndarray, expected_right: np.ndarray) -> float:
    """Fraction of (image, slot) pairs where the probe agrees with the prompt."""
    if predicted["left"].size == 0:
        raise InputError("identity_accuracy: empty batch")
    hits = (predicted["left"] == expected_left).sum() + (predicted["right"] == expected_right).sum()
    return float(hits) / (2 * predicted["left"].size)


def blend_rate(predicted: Dict[str, np.ndarray], expected_left: np.ndarray, expected_right: np.ndarray) -> float:
    """Among prompts naming two different identities, how often both slots read as one identity."""
    distinct = np.asarray(expected_left) != np.asarray(expected_right)
    if not distinct.any():
        return 0.0
    return float(np.mean(predicted["left"][distinct] == predicted["right"][distinct]))


@dataclass(frozen=True)
class EvalPrompt:
    prompt: str
    left: int
    right: int


@dataclass(frozen=True)
class AnchorCase:
    prompt: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class Evaluator:
    """Everything needed to sample and score: models, probe and sampler settings."""

    codec: LatentCodec
    codec_params: ParamStore
    denoiser: Denoiser
    params: ParamStore
    vocab: Vocabulary
    schedule: NoiseSchedule
    probe: ProbeClassifier
    probe_params: ParamStore
    sampler: SamplerConfig

    def sample(self, prompt: str, anchor: Optional[np.ndarray], batch: int, seed: int) -> np.ndarray:
        strength = self.sampler.strength if anchor is not None else None
        config = self.sampler.model_copy(update={"batch": batch, "seed": seed, "strength": strength})
        return generate(
            self.codec, self.codec_params, self.denoiser, self.params, self.vocab, self.schedule, prompt, anchor, config
        )

    def score(self, prompts: Sequence[EvalPrompt], per_prompt: int, seed: int) -> Tuple[float, float, int]:
        lefts: List[np.ndarray] = []
        rights: List[np.ndarray] = []
        expected_l: List[int] = []
        expected_r: List[int] = []
        for i, item in enumerate(prompts):
            images = self.sample(item.prompt, None, per_prompt, seed + i)
            predicted = self.probe.predict(self.probe_params, images)
            lefts.append(predicted["left"])
            rights.append(predicted["right"])
            expected_l += [item.left] * per_prompt
            expected_r += [item.right] * per_prompt
        predicted = {"left": np.concatenate(lefts), "right": np.concatenate(rights)}
        left, right = np.array(expected_l), np.array(expected_r)
        return identity_accuracy(predicted, left, right), blend_rate(predicted, left, right), left.size

    def anchor_consistency(self, cases: Sequence[AnchorCase], batch: int, seed: int) -> Tuple[List[float], List[float]]:
        """Per-case background consistency with and without the anchor; case i samples both batches from seed + i."""
        with_anchor: List[float] = []
        without: List[float] = []
        for i, case in enumerate(cases):
            with_anchor.append(background_consistency(self.sample(case.prompt, case.image, batch, seed + i), case.mask))
            without.append(background_consistency(self.sample(case.prompt, None, batch, seed + i), case.mask))
            logger.debug("Eval: anchor case %d consistency %.4f vs %.4f", i, with_anchor[-1], without[-1])
        return with_anchor, without


def evaluate(
    evaluator: Evaluator,
    prompts: Sequence[EvalPrompt],
    class_prompts: Sequence[EvalPrompt],
    anchors: Sequence[AnchorCase],
    reference_images: np.ndarray,
    config: EvalConfig,
) -> EvalReport:
    if not prompts or not anchors or len(reference_images) == 0:
        raise InputError("evaluate: prompts, anchors and reference images must be non-empty")
    per_prompt = config.images_per_prompt
    accuracy, blend, n_identity = evaluator.score(prompts, per_prompt, config.seed)
    if class_prompts:
        class_acc, _, n_class = evaluator.score(class_prompts, per_prompt, config.seed + 10_000)
    else:
        class_acc, n_class = accuracy, n_identity

    with_anchor, without = evaluator.anchor_consistency(anchors, evaluator.sampler.batch, config.seed + 20_000)

    recon = evaluator.codec.reconstruct(evaluator.codec_params, reference_images)
    report = EvalReport(
        identity_accuracy=accuracy,
        class_accuracy=class_acc,
        background_consistency=float(np.mean(with_anchor)),
        background_consistency_no_anchor=float(np.mean(without)),
        anchor_consistency_wins=int(np.sum(np.array(with_anchor) < np.array(without))),
        reconstruction_psnr=reconstruction_psnr(reference_images, recon),
        blend_rate=blend,
        n_identity_samples=n_identity,
        n_class_samples=n_class,
        n_consistency_batches=len(anchors),
        n_reconstruction_samples=int(len(reference_images)),
    )
    logger.info(
        "Eval: identity=%.3f class=%.3f consistency=%.4f (no anchor %.4f, anchor lower in %d/%d) psnr=%.2f blend=%.3f",
        report.identity_accuracy,
        report.class_accuracy,
        report.background_consistency,
        report.background_consistency_no_anchor,
        report.anchor_consistency_wins,
        report.n_consistency_batches,
        report.reconstruction_psnr,
        report.blend_rate,
    )
    return report
