"""Deterministic DDIM sampling with classifier-free guidance and anchor initialisation.

Each batch element is sampled on its own stream ``Rng(seed).derive(i)`` and
its own forward passes, so element i never depends on the batch it sits in.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..errors import InputError, ShapeError
from ..models.schemas import AnchorMode, SamplerConfig
from ..numerics import ParamStore, Rng, no_grad
from .codec import LatentCodec
from .conditioning import Conditioning, Vocabulary
from .denoiser import Denoiser
from .schedule import TERMINAL, NoiseSchedule, add_noise, ddim_step, ddim_timesteps, strength_to_start

logger = logging.getLogger(__name__)

EpsFn = Callable[[np.ndarray, int], np.ndarray]


def guided_eps(
    denoiser: Denoiser,
    params: ParamStore,
    z_t: np.ndarray,
    t: int,
    cond: Conditioning,
    guidance_scale: float,
) -> np.ndarray:
    """eps_uncond + w * (eps_cond - eps_uncond); the anchor stays in both branches.

    w = 1 runs only the conditional pass and w = 0 only the unconditional one.
    """
    if guidance_scale < 0:
        raise InputError(f"guidance scale must be >= 0, got {guidance_scale}")
    with no_grad():
        if guidance_scale == 1.0:
            return denoiser.predict_noise(params, z_t, t, cond).data
        eps_uncond = denoiser.predict_noise(params, z_t, t, cond.with_null_text()).data
        if guidance_scale == 0.0:
            return eps_uncond
        eps_cond = denoiser.predict_noise(params, z_t, t, cond).data
    w = eps_cond.dtype.type(guidance_scale)
    return eps_uncond + w * (eps_cond - eps_uncond)


def run_ddim(schedule: NoiseSchedule, z: np.ndarray, timesteps: Sequence[int], eps_fn: EpsFn) -> np.ndarray:
    """Walk ``timesteps`` (noisiest first) down to the terminal step."""
    for k, t in enumerate(timesteps):
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else TERMINAL
        z, _ = ddim_step(schedule, z, eps_fn(z, t), t, t_prev)
    return z


def _check_request(denoiser: Denoiser, cond: Conditioning, config: SamplerConfig) -> float:
    strength = config.resolved_strength(cond.has_anchor)
    if not cond.has_anchor and strength < 1.0:
        raise InputError(f"strength {strength} < 1 requires an anchor")
    if cond.batch_size not in (1, config.batch):
        raise ShapeError(f"ddim_sample: conditioning batch {cond.batch_size} is neither 1 nor {config.batch}")
    if cond.has_anchor:
        cfg = denoiser.config
        expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if cond.anchor_latent.shape[1:] != expected:
            raise ShapeError(f"ddim_sample: anchor latent {cond.anchor_latent.shape[1:]} does not match {expected}")
    return strength


def _sample_one(
    denoiser: Denoiser,
    params: ParamStore,
    schedule: NoiseSchedule,
    cond: Conditioning,
    config: SamplerConfig,
    strength: float,
    rng: Rng,
) -> np.ndarray:
    cfg = denoiser.config
    shape = (1, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    mode = config.anchor_mode
    init_from_anchor = cond.has_anchor and mode in (AnchorMode.BOTH, AnchorMode.INIT)
    model_cond = cond
    if cond.has_anchor and mode == AnchorMode.INIT:
        model_cond = Conditioning(cond.token_ids)

    eps = rng.standard_normal(shape)
    if init_from_anchor:
        t_start, timesteps = strength_to_start(schedule, strength, config.steps)
        if t_start is None:
            return cond.anchor_latent.astype(np.float32, copy=True)
        z = add_noise(schedule, cond.anchor_latent, eps, t_start).astype(np.float32)
    else:
        timesteps = ddim_timesteps(schedule, config.steps)
        z = eps

    def eps_fn(z_t: np.ndarray, t: int) -> np.ndarray:
        return guided_eps(denoiser, params, z_t, t, model_cond, config.guidance_scale)

    return run_ddim(schedule, z, timesteps, eps_fn)


def ddim_sample(
    denoiser: Denoiser,
    params: ParamStore,
    schedule: NoiseSchedule,
    cond: Conditioning,
    config: SamplerConfig,
    progress: bool = False,
) -> np.ndarray:
    """Sample ``config.batch`` latents; a single conditioning is shared by every element."""
    strength = _check_request(denoiser, cond, config)
    base = Rng(config.seed)
    conds: List[Conditioning] = [
        cond.select(slice(0, 1) if cond.batch_size == 1 else slice(i, i + 1)) for i in range(config.batch)
    ]

    def sample(i: int) -> np.ndarray:
        return _sample_one(denoiser, params, schedule, conds[i], config, strength, base.derive(i))

    logger.debug(
        "Sampler: batch %d, %d steps, w=%g, strength %g, anchor %s",
        config.batch,
        config.steps,
        config.guidance_scale,
        strength,
        cond.has_anchor,
    )
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            latents = list(tqdm(pool.map(sample, range(config.batch)), total=config.batch, disable=not progress))
    else:
        latents = [sample(i) for i in tqdm(range(config.batch), desc="sample", disable=not progress)]
    return np.concatenate(latents, axis=0)


def generate(
    codec: LatentCodec,
    codec_params: ParamStore,
    denoiser: Denoiser,
    params: ParamStore,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    prompt: str,
    anchor_image: Optional[np.ndarray],
    config: SamplerConfig,
    progress: bool = False,
) -> np.ndarray:
    """Prompt (+ optional anchor image) to a batch of (3, H, W) images in [-1, 1]."""
    token_ids = vocab.tokenize(prompt, denoiser.text.seq_len)
    anchor_latent = None
    if anchor_image is not None:
        anchor = np.asarray(anchor_image, dtype=np.float32)
        if anchor.ndim == 3:
            anchor = anchor[None]
        if anchor.shape[0] != 1:
            raise ShapeError(f"generate: expected one anchor image, got {anchor.shape[0]}")
        anchor_latent = codec.encode(codec_params, anchor)
    cond = Conditioning(token_ids[None, :], anchor_latent)
    latents = ddim_sample(denoiser, params, schedule, cond, config, progress=progress)
    images = codec.decode(codec_params, latents)
    logger.info("Sampler: generated %d images for %r", images.shape[0], prompt)
    return images
