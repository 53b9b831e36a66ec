"""Deterministic convolutional autoencoder between images and latents.

Images are (N, 3, H, W) arrays in [-1, 1]; latents are (N, C, H/f, W/f) with
f = 2 ** len(channels). Encoded latents are multiplied by the per-channel
``codec/latent_scale`` vector, which ``train_codec`` sets to 1/std over the
training corpus.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from ..errors import InputError, ShapeError
from ..models.schemas import CodecConfig, TrainConfig
from ..numerics import (
    Adam,
    ParamStore,
    Rng,
    Tensor,
    avg_pool2d,
    backpropagate,
    concat,
    mse,
    no_grad,
    silu,
    upsample_nearest,
)
from .layers import Conv2d, GroupNorm, Layer, ParamSpec, ResBlock, Upsample, init_specs
from .training import TrainingLog, check_loss, divergence_guard, minibatches

logger = logging.getLogger(__name__)

PREFIX = "codec"
LATENT_SCALE = f"{PREFIX}/latent_scale"
ENCODE_CHUNK = 64


def check_images(images: np.ndarray, factor: int) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"codec: expected images of shape (N, 3, H, W), got {images.shape}")
    _, _, h, w = images.shape
    if h % factor or w % factor:
        raise ShapeError(f"codec: image size {h}x{w} not divisible by factor {factor}")
    return images


class LatentCodec:
    def __init__(self, config: CodecConfig):
        self.config = config
        widths = list(config.channels)
        groups = config.norm_groups

        self.enc_in = Conv2d(f"{PREFIX}/enc/conv_in", 3, widths[0])
        self.enc_blocks: List[ResBlock] = []
        self.enc_down: List[Conv2d] = []
        prev = widths[0]
        for level, width in enumerate(widths):
            self.enc_blocks.append(ResBlock(f"{PREFIX}/enc/level{level}/res", prev, width, groups))
            self.enc_down.append(Conv2d(f"{PREFIX}/enc/level{level}/down", width, width, stride=2))
            prev = width
        self.enc_norm = GroupNorm(f"{PREFIX}/enc/norm_out", prev, groups)
        self.enc_out = Conv2d(f"{PREFIX}/enc/conv_out", prev, config.latent_channels)

        self.dec_in = Conv2d(f"{PREFIX}/dec/conv_in", config.latent_channels, widths[-1])
        self.dec_blocks: List[ResBlock] = []
        self.dec_up: List[Upsample] = []
        prev = widths[-1]
        for level in reversed(range(len(widths))):
            width = widths[level]
            self.dec_blocks.append(ResBlock(f"{PREFIX}/dec/level{level}/res", prev, width, groups))
            self.dec_up.append(Upsample(f"{PREFIX}/dec/level{level}/up", width))
            prev = width
        self.dec_norm = GroupNorm(f"{PREFIX}/dec/norm_out", prev, groups)
        self.dec_out = Conv2d(f"{PREFIX}/dec/conv_out", prev, 3)

    @property
    def factor(self) -> int:
        return self.config.factor

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def layers(self) -> List[Layer]:
        return [
            self.enc_in,
            *self.enc_blocks,
            *self.enc_down,
            self.enc_norm,
            self.enc_out,
            self.dec_in,
            *self.dec_blocks,
            *self.dec_up,
            self.dec_norm,
            self.dec_out,
        ]

    def specs(self) -> List[ParamSpec]:
        specs = [spec for layer in self.layers() for spec in layer.specs()]
        specs.append(ParamSpec(LATENT_SCALE, (self.latent_channels,), "ones"))
        return specs

    def init_params(self, rng: Rng) -> ParamStore:
        store = ParamStore()
        init_specs(self.specs(), store, rng)
        return store

    # ------------------------------------------------------------------
    # Differentiable passes (no scaling, no clamp)
    # ------------------------------------------------------------------

    def encode_tensor(self, params: ParamStore, images: Tensor) -> Tensor:
        h = self.enc_in(params, images)
        for block, down in zip(self.enc_blocks, self.enc_down):
            h = down(params, block(params, h))
        return self.enc_out(params, silu(self.enc_norm(params, h)))

    def decode_tensor(self, params: ParamStore, latents: Tensor) -> Tensor:
        h = self.dec_in(params, latents)
        for block, up in zip(self.dec_blocks, self.dec_up):
            h = up(params, block(params, h))
        return self.dec_out(params, silu(self.dec_norm(params, h)))

    # ------------------------------------------------------------------
    # Public boundary
    # ------------------------------------------------------------------

    @property
    def latent_size(self) -> Optional[int]:
        size = self.config.image_size
        return None if size is None else size // self.factor

    def check_latents(self, latents: np.ndarray) -> np.ndarray:
        """Latents must carry the codec's channels on a square grid of the trained size."""
        latents = np.asarray(latents)
        if latents.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise ShapeError(
                f"codec: expected latents of shape (N, {self.latent_channels}, h, w), got {latents.shape}"
            )
        h, w = latents.shape[2:]
        expected = self.latent_size
        if h != w or (expected is not None and h != expected):
            side = "h = w" if expected is None else str(expected)
            raise ShapeError(f"codec: latent grid {h}x{w} does not match the codec (side {side})")
        return latents

    def encode(self, params: ParamStore, images: np.ndarray) -> np.ndarray:
        images = check_images(images, self.factor)
        size = self.config.image_size
        if size is not None and images.shape[2:] != (size, size):
            raise ShapeError(f"codec: trained on {size}x{size} images, got {images.shape[2]}x{images.shape[3]}")
        scale = params[LATENT_SCALE].reshape(1, -1, 1, 1)
        chunks = []
        for start in range(0, images.shape[0], ENCODE_CHUNK):
            with no_grad():
                raw = self.encode_tensor(params, Tensor(np.clip(images[start : start + ENCODE_CHUNK], -1, 1)))
            chunks.append(raw.data * scale)
        return np.concatenate(chunks, axis=0).astype(np.float32)

    def decode(self, params: ParamStore, latents: np.ndarray) -> np.ndarray:
        latents = self.check_latents(latents)
        scale = params[LATENT_SCALE].reshape(1, -1, 1, 1)
        chunks = []
        for start in range(0, latents.shape[0], ENCODE_CHUNK):
            with no_grad():
                out = self.decode_tensor(params, Tensor(latents[start : start + ENCODE_CHUNK] / scale))
            chunks.append(np.clip(out.data, -1, 1))
        return np.concatenate(chunks, axis=0).astype(np.float32)

    def reconstruct(self, params: ParamStore, images: np.ndarray) -> np.ndarray:
        return self.decode(params, self.encode(params, images))


class BaselineCodec:
    """Fixed average-pool down / nearest up codec, the reconstruction yardstick."""

    def __init__(self, factor: int = 4, latent_channels: int = 4):
        self.factor = factor
        self.latent_channels = latent_channels

    def encode(self, images: np.ndarray) -> np.ndarray:
        images = check_images(images, self.factor)
        pooled = avg_pool2d(np.clip(images, -1, 1), self.factor).data
        keep = min(3, self.latent_channels)
        n, _, h, w = pooled.shape
        pad = np.zeros((n, self.latent_channels - keep, h, w), dtype=pooled.dtype)
        return concat([pooled[:, :keep], pad], axis=1).data

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents)
        if latents.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise ShapeError(f"baseline codec: latents {latents.shape} do not have {self.latent_channels} channels")
        rgb = latents[:, :3]
        if rgb.shape[1] < 3:
            rgb = np.concatenate([rgb, np.zeros_like(rgb[:, :1]).repeat(3 - rgb.shape[1], axis=1)], axis=1)
        return np.clip(upsample_nearest(rgb, self.factor).data, -1, 1)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(images))


@dataclass
class CodecTrainResult:
    params: ParamStore
    log: TrainingLog
    final_mse: float
    baseline_mse: float
    latent_std: List[float] = field(default_factory=list)


def _eval_reconstruction(codec: LatentCodec, params: ParamStore, images: np.ndarray) -> float:
    with no_grad():
        return mse(codec.decode_tensor(params, codec.encode_tensor(params, Tensor(images))), images).item()


def latent_scale_for(codec: LatentCodec, params: ParamStore, images: np.ndarray) -> np.ndarray:
    """1/std per latent channel over ``images`` (unit scale for constant channels)."""
    raws = []
    for start in range(0, images.shape[0], ENCODE_CHUNK):
        with no_grad():
            raws.append(codec.encode_tensor(params, Tensor(images[start : start + ENCODE_CHUNK])).data)
    std = np.concatenate(raws, axis=0).astype(np.float64).std(axis=(0, 2, 3))
    return np.where(std > 0, 1.0 / np.maximum(std, 1e-12), 1.0).astype(np.float32)


def train_codec(
    images: np.ndarray,
    config: CodecConfig,
    train: TrainConfig,
    metrics_path: Optional[str] = None,
    progress: bool = False,
) -> CodecTrainResult:
    """Pixel-MSE autoencoder training, then the latent scale is fixed from the corpus."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError("train_codec: dataset is empty")
    codec = LatentCodec(config)
    images = np.clip(check_images(images, codec.factor), -1, 1)
    n = images.shape[0]

    root = Rng(train.seed)
    params = codec.init_params(root.fork("codec/init"))
    shuffle_rng = root.fork("codec/shuffle")
    eval_idx = np.sort(root.fork("codec/eval").permutation(n)[: train.eval_batch])
    eval_images = images[eval_idx]

    optimizer = Adam(train.learning_rate, trainable=lambda name: name != LATENT_SCALE)
    log = TrainingLog("Codec", metrics_path)
    logger.info(
        "Codec: training on %d images, %d epochs, batch %d, lr %g (%d parameters)",
        n,
        train.epochs,
        train.batch_size,
        train.learning_rate,
        params.num_scalars(),
    )

    step = 0
    for epoch in tqdm(range(train.epochs), desc="codec", disable=not progress):
        if train.max_steps is not None and step >= train.max_steps:
            break
        batch_losses = []
        for batch in minibatches(n, train.batch_size, shuffle_rng):
            if train.max_steps is not None and step >= train.max_steps:
                break
            x = images[batch]
            with divergence_guard("Codec", epoch, step):
                recon = codec.decode_tensor(params, codec.encode_tensor(params, Tensor(x)))
                loss = mse(recon, x)
                grads = backpropagate(loss, params)
                optimizer.step(params, grads)
            step += 1
            value = check_loss("Codec", loss.item(), epoch, step)
            batch_losses.append(value)
            log.step(step, value, train.learning_rate)
        with divergence_guard("Codec", epoch, step):
            eval_loss = _eval_reconstruction(codec, params, eval_images)
        log.epoch(epoch, float(np.mean(batch_losses)) if batch_losses else eval_loss, eval_loss)

    params[LATENT_SCALE] = latent_scale_for(codec, params, images)
    final_mse = float(np.mean((codec.reconstruct(params, eval_images) - eval_images) ** 2))
    baseline = BaselineCodec(codec.factor, config.latent_channels)
    baseline_mse = float(np.mean((baseline.reconstruct(eval_images) - eval_images) ** 2))
    latent_std = codec.encode(params, images).astype(np.float64).std(axis=(0, 2, 3)).tolist()
    logger.info(
        "Codec: final reconstruction mse=%.5f (baseline %.5f), latent std %s",
        final_mse,
        baseline_mse,
        ", ".join("%.3f" % s for s in latent_std),
    )
    return CodecTrainResult(params, log, final_mse, baseline_mse, latent_std)
