"""Base latent-diffusion training and placeholder fine-tuning with prior preservation.

Both losses are noise-prediction losses. The prior term of the fine-tuning
loss is evaluated on latents sampled once from the frozen base model under
the class prompt.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..errors import InputError, ShapeError
from ..models.schemas import DreamboothConfig, SamplerConfig, TrainConfig
from ..numerics import Adam, ParamStore, Rng, Tensor, add, backpropagate, mse, no_grad, scale
from .codec import LatentCodec
from .conditioning import TOKEN_EMBEDDING, Conditioning, Vocabulary, null_token_ids, register_placeholder
from .denoiser import Denoiser
from .sampler import ddim_sample
from .schedule import NoiseSchedule, add_noise
from .training import TrainingLog, check_loss, divergence_guard, minibatches

logger = logging.getLogger(__name__)

MIN_INSTANCES = 3
MAX_INSTANCES = 5


def loss_base(
    denoiser: Denoiser,
    params: ParamStore,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    cond: Conditioning,
    rng: Rng,
) -> Tensor:
    """Weighted mean of (eps - eps_hat)^2 with t ~ U[0, T) and eps ~ N(0, I) drawn from ``rng``.

    Draw order is all timesteps, then all noise.
    """
    z0 = np.asarray(z0)
    if z0.ndim != 4 or z0.shape[0] == 0:
        raise InputError(f"loss_base: expected a non-empty latent batch, got shape {z0.shape}")
    if cond.batch_size != z0.shape[0]:
        raise ShapeError(f"loss_base: {cond.batch_size} conditionings for {z0.shape[0]} latents")
    t = rng.integers(schedule.T, z0.shape[0])
    eps = rng.standard_normal(z0.shape)
    z_t = add_noise(schedule, z0, eps, t)
    eps_hat = denoiser.predict_noise(params, z_t, t, cond)
    return mse(eps_hat, eps, weights=schedule.weights_at(t))


def loss_prior_preservation(
    denoiser: Denoiser,
    params: ParamStore,
    schedule: NoiseSchedule,
    instance: Tuple[np.ndarray, Conditioning],
    prior: Optional[Tuple[np.ndarray, Conditioning]],
    lambda_prior: float,
    rng: Rng,
    prior_rng: Optional[Rng] = None,
) -> Tensor:
    """Instance term + lambda * prior term, each with its own (t, eps) draws.

    The prior term draws from ``prior_rng`` when given, else continues ``rng``.
    With lambda = 0 the prior term is not evaluated.
    """
    if lambda_prior < 0:
        raise InputError(f"lambda_prior must be >= 0, got {lambda_prior}")
    instance_loss = loss_base(denoiser, params, schedule, instance[0], instance[1], rng)
    if lambda_prior == 0:
        return instance_loss
    if prior is None or np.asarray(prior[0]).shape[0] == 0:
        raise InputError("loss_prior_preservation: prior batch is empty while lambda > 0")
    prior_loss = loss_base(denoiser, params, schedule, prior[0], prior[1], prior_rng or rng)
    return add(instance_loss, scale(prior_loss, lambda_prior))


# ------------------------------------------------------------------
# Base training
# ------------------------------------------------------------------


@dataclass
class BaseTrainResult:
    params: ParamStore
    log: TrainingLog
    steps: int


def init_model_params(denoiser: Denoiser, vocab: Vocabulary, rng: Rng) -> ParamStore:
    """Fresh ``unet/*`` and ``text/*`` parameters."""
    params = denoiser.init_params(rng.fork("unet/init"))
    params.update(denoiser.text.init_params(len(vocab), rng.fork("text/init")))
    return params


def _training_cond(
    token_ids: np.ndarray,
    latents: np.ndarray,
    use_anchor: bool,
    text_drop_prob: float,
    anchor_drop_prob: float,
    rng: Optional[Rng],
) -> Conditioning:
    """Conditioning with classifier-free dropout; the scene latent is its own anchor."""
    ids = token_ids.copy()
    n = ids.shape[0]
    anchor_mask = np.ones(n, dtype=np.float32)
    if rng is not None:
        drop_text = rng.uniform(n) < text_drop_prob
        ids[drop_text] = null_token_ids(ids.shape[1], int(drop_text.sum()))
        anchor_mask = (rng.uniform(n) >= anchor_drop_prob).astype(np.float32)
    if not use_anchor:
        return Conditioning(ids)
    return Conditioning(ids, latents, anchor_mask)


def train_base(
    denoiser: Denoiser,
    latents: np.ndarray,
    token_ids: np.ndarray,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    config: TrainConfig,
    params: Optional[ParamStore] = None,
    metrics_path: Optional[str] = None,
    progress: bool = False,
) -> BaseTrainResult:
    """Adam on the noise-prediction loss over codec-encoded, scaled latents."""
    latents = np.asarray(latents, dtype=np.float32)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise InputError("train_base: dataset is empty")
    if token_ids.shape[0] != latents.shape[0]:
        raise ShapeError(f"train_base: {token_ids.shape[0]} captions for {latents.shape[0]} latents")
    n = latents.shape[0]
    use_anchor = denoiser.config.two_stream

    root = Rng(config.seed)
    if params is None:
        params = init_model_params(denoiser, vocab, root)
    else:
        params = params.copy()
    shuffle_rng = root.fork("train/shuffle")
    drop_rng = root.fork("train/dropout")
    noise_rng = root.fork("train/noise")
    eval_idx = np.sort(root.fork("train/eval").permutation(n)[: config.eval_batch])
    eval_noise = root.fork("train/eval/noise")
    eval_cond = _training_cond(token_ids[eval_idx], latents[eval_idx], use_anchor, 0.0, 0.0, None)

    optimizer = Adam(config.learning_rate)
    log = TrainingLog("Trainer", metrics_path)
    logger.info(
        "Trainer: base training on %d latents, %d epochs, batch %d, lr %g (%d parameters)",
        n,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        params.num_scalars("unet/"),
    )

    step = 0
    for epoch in tqdm(range(config.epochs), desc="train", disable=not progress):
        if config.max_steps is not None and step >= config.max_steps:
            break
        batch_losses: List[float] = []
        for batch in minibatches(n, config.batch_size, shuffle_rng):
            if config.max_steps is not None and step >= config.max_steps:
                break
            cond = _training_cond(
                token_ids[batch], latents[batch], use_anchor, config.text_drop_prob, config.anchor_drop_prob, drop_rng
            )
            with divergence_guard("Trainer", epoch, step):
                loss = loss_base(denoiser, params, schedule, latents[batch], cond, noise_rng)
                optimizer.step(params, backpropagate(loss, params))
            step += 1
            value = check_loss("Trainer", loss.item(), epoch, step)
            batch_losses.append(value)
            log.step(step, value, config.learning_rate)
        with divergence_guard("Trainer", epoch, step), no_grad():
            eval_loss = loss_base(denoiser, params, schedule, latents[eval_idx], eval_cond, eval_noise.copy()).item()
        log.epoch(epoch, float(np.mean(batch_losses)) if batch_losses else eval_loss, eval_loss)

    logger.info("Trainer: finished after %d steps, params checksum %s", step, params.checksum())
    return BaseTrainResult(params, log, step)


# ------------------------------------------------------------------
# Prior set and fine-tuning
# ------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSample:
    latent: np.ndarray
    prompt: str
    token_ids: np.ndarray


def generate_prior_set(
    denoiser: Denoiser,
    params: ParamStore,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    class_prompt: str,
    n: int,
    seed: int,
    steps: int = 50,
    workers: int = 1,
) -> List[PriorSample]:
    """``n`` latents from the frozen model: unguided (w = 1), no anchor, element i on stream seed ^ i."""
    if n <= 0:
        raise InputError(f"generate_prior_set: n must be > 0, got {n}")
    ids = vocab.tokenize(class_prompt, denoiser.text.seq_len)
    config = SamplerConfig(steps=steps, guidance_scale=1.0, batch=n, seed=seed, workers=workers)
    latents = ddim_sample(denoiser, params, schedule, Conditioning(ids[None, :]), config)
    logger.info("Trainer: generated %d prior samples for %r (seed %d)", n, class_prompt, seed)
    return [PriorSample(latent=latents[i], prompt=class_prompt, token_ids=ids) for i in range(n)]


@dataclass
class FinetuneResult:
    params: ParamStore
    vocab: Vocabulary
    prior: List[PriorSample]
    log: TrainingLog


def _placeholder_row_mask(vocab: Vocabulary, placeholder: str) -> np.ndarray:
    mask = np.zeros(len(vocab), dtype=np.float32)
    mask[vocab.id(placeholder)] = 1.0
    return mask


def finetune_dreambooth(
    denoiser: Denoiser,
    params: ParamStore,
    codec: LatentCodec,
    codec_params: ParamStore,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    instance_images: np.ndarray,
    config: DreamboothConfig,
    instance_captions: Optional[Sequence[str]] = None,
    prior: Optional[List[PriorSample]] = None,
    metrics_path: Optional[str] = None,
    progress: bool = False,
) -> FinetuneResult:
    """Bind ``config.placeholder`` to the instance images.

    Trains ``unet/*`` and only the placeholder row of the token embedding with
    fresh Adam state. The codec stays frozen. With 0 steps the inputs come
    back unchanged.
    """
    instance_images = np.asarray(instance_images, dtype=np.float32)
    if instance_images.ndim != 4:
        raise ShapeError(f"finetune: expected instance images (k, 3, H, W), got {instance_images.shape}")
    k = instance_images.shape[0]
    if not config.allow_any_instance_count and not MIN_INSTANCES <= k <= MAX_INSTANCES:
        raise InputError(f"finetune: expected {MIN_INSTANCES}-{MAX_INSTANCES} instance images, got {k}")
    if k == 0:
        raise InputError("finetune: no instance images")
    if config.steps == 0:
        logger.info("Trainer: fine-tuning with 0 steps, returning the base parameters")
        return FinetuneResult(params.copy(), vocab, list(prior or []), TrainingLog("Finetune", metrics_path))

    instance_latents = codec.encode(codec_params, instance_images)
    cfg = denoiser.config
    if instance_latents.shape[1:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
        raise ShapeError(f"finetune: instance images encode to {instance_latents.shape[1:]}, model expects {cfg.latent_size}")

    root = Rng(config.seed)
    if prior is None and config.lambda_prior > 0:
        prior = generate_prior_set(
            denoiser, params, schedule, vocab, config.class_prompt, config.prior_set_size, config.seed, config.prior_steps
        )
    prior = list(prior or [])

    if config.placeholder in vocab:
        tuned = params.copy()
    else:
        vocab, tuned = register_placeholder(vocab, params, config.placeholder, root.fork("placeholder"))
    captions = list(instance_captions) if instance_captions is not None else [config.placeholder] * k
    if len(captions) != k:
        raise ShapeError(f"finetune: {len(captions)} captions for {k} instance images")
    instance_ids = vocab.tokenize_batch(captions, denoiser.text.seq_len)
    prior_latents = np.stack([p.latent for p in prior]) if prior else None
    prior_ids = np.stack([p.token_ids for p in prior]) if prior else None

    optimizer = Adam(
        config.learning_rate,
        trainable=lambda name: name.startswith("unet/") or name == TOKEN_EMBEDDING,
        row_masks={TOKEN_EMBEDDING: _placeholder_row_mask(vocab, config.placeholder)},
    )
    use_anchor = cfg.two_stream
    drop_rng = root.fork("finetune/dropout")
    pick_rng = root.fork("finetune/prior")
    noise_rng = root.fork("finetune/noise")
    prior_noise_rng = root.fork("finetune/prior_noise")
    log = TrainingLog("Finetune", metrics_path)
    logger.info(
        "Trainer: fine-tuning %r on %d instances, %d steps, lambda %g, %d prior samples",
        config.placeholder,
        k,
        config.steps,
        config.lambda_prior,
        len(prior),
    )

    for step in tqdm(range(config.steps), desc="finetune", disable=not progress):
        inst_cond = _training_cond(instance_ids, instance_latents, use_anchor, 0.0, config.anchor_drop_prob, drop_rng)
        prior_batch = None
        if prior_latents is not None and config.lambda_prior > 0:
            pick = pick_rng.integers(prior_latents.shape[0], k)
            prior_cond = _training_cond(
                prior_ids[pick], prior_latents[pick], use_anchor, 0.0, config.anchor_drop_prob, drop_rng
            )
            prior_batch = (prior_latents[pick], prior_cond)
        with divergence_guard("Finetune", 0, step):
            loss = loss_prior_preservation(
                denoiser,
                tuned,
                schedule,
                (instance_latents, inst_cond),
                prior_batch,
                config.lambda_prior,
                noise_rng,
                prior_noise_rng,
            )
            optimizer.step(tuned, backpropagate(loss, tuned))
        value = check_loss("Finetune", loss.item(), 0, step + 1)
        log.step(step + 1, value, config.learning_rate)
        if (step + 1) % 50 == 0 or step + 1 == config.steps:
            logger.info("Finetune: step %d loss=%.5f", step + 1, value)

    return FinetuneResult(tuned, vocab, prior, log)
