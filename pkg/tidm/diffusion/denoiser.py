"""Two-stream conditional U-Net predicting the noise in a latent.

The main stream is a small U-Net with text cross-attention at the configured
levels. The anchor stream mirrors its down path on the clean anchor latent;
after each down level its features pass through a zero-initialised 1x1
projection and are added to the main stream, gated per element by the
conditioning's anchor mask.
"""

import logging
from typing import List, Optional, Union

import numpy as np

from ..errors import InputError, ShapeError
from ..models.schemas import DenoiserConfig, TextConfig
from ..numerics import ParamStore, Rng, Tensor, add, as_tensor, mul, reshape, silu
from .conditioning import Conditioning, TextEncoder, key_padding_bias
from .layers import Conv2d, CrossAttention, GroupNorm, Layer, Linear, ParamSpec, ResBlock, Upsample, init_specs

logger = logging.getLogger(__name__)

MAIN = "unet/main"
ANCHOR = "unet/anchor"
MAX_PERIOD = 10000.0


def time_embedding(t: Union[int, np.ndarray], dim: int) -> np.ndarray:
    """Sinusoidal features: ``dim/2`` sines followed by ``dim/2`` cosines.

    Accepts a scalar t (returns (dim,)) or a vector of timesteps (returns (N, dim)).
    """
    if dim < 2 or dim % 2:
        raise InputError(f"time_embedding: dim must be even and >= 2, got {dim}")
    steps = np.asarray(t, dtype=np.float64)
    if steps.size and steps.min() < 0:
        raise InputError(f"time_embedding: timesteps must be >= 0, got {t}")
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)
    args = steps[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class _DownLevel:
    def __init__(self, prefix: str, level: int, in_ch: int, out_ch: int, blocks: int, attend: bool, cfg: DenoiserConfig):
        base = f"{prefix}/down{level}"
        self.res: List[ResBlock] = []
        self.attn: List[Optional[CrossAttention]] = []
        prev = in_ch
        for b in range(blocks):
            self.res.append(ResBlock(f"{base}/res{b}", prev, out_ch, cfg.norm_groups, cfg.time_embed_dim))
            self.attn.append(
                CrossAttention(f"{base}/attn{b}", out_ch, cfg.context_dim, cfg.norm_groups) if attend else None
            )
            prev = out_ch

    def layers(self) -> List[Layer]:
        return [*self.res, *[a for a in self.attn if a is not None]]

    def __call__(self, store: ParamStore, h: Tensor, temb: Tensor, context: Tensor, bias: np.ndarray) -> Tensor:
        for res, attn in zip(self.res, self.attn):
            h = res(store, h, temb)
            if attn is not None:
                h = attn(store, h, context, bias)
        return h


class Denoiser:
    def __init__(self, config: DenoiserConfig, text_config: Optional[TextConfig] = None):
        self.config = config
        self.text = TextEncoder(text_config or TextConfig(embed_dim=config.context_dim))
        if self.text.config.embed_dim != config.context_dim:
            raise InputError("Denoiser: text embed_dim must equal context_dim")
        widths = config.widths
        self.sizes = config.level_sizes()
        attend = set(config.resolved_attention_levels)
        n_levels = len(widths)
        groups = config.norm_groups
        temb = config.time_embed_dim

        self.time_fc1 = Linear(f"{MAIN}/time/fc1", config.base_channels, temb)
        self.time_fc2 = Linear(f"{MAIN}/time/fc2", temb, temb)
        self.conv_in = Conv2d(f"{MAIN}/conv_in", config.latent_channels, widths[0])

        self.down: List[_DownLevel] = []
        self.downsample: List[Optional[Conv2d]] = []
        prev = widths[0]
        for level, width in enumerate(widths):
            self.down.append(_DownLevel(MAIN, level, prev, width, config.blocks_per_level, level in attend, config))
            self.downsample.append(self._downsample_for(MAIN, level, width))
            prev = width

        self.up_res: List[ResBlock] = []
        self.up_attn: List[Optional[CrossAttention]] = []
        self.upsample: List[Optional[Upsample]] = []
        for level in reversed(range(n_levels)):
            width = widths[level]
            self.up_res.append(ResBlock(f"{MAIN}/up{level}/res", prev, width, groups, temb))
            self.up_attn.append(
                CrossAttention(f"{MAIN}/up{level}/attn", width, config.context_dim, groups) if level in attend else None
            )
            grows = level > 0 and self.sizes[level - 1] != self.sizes[level]
            self.upsample.append(Upsample(f"{MAIN}/up{level}/upsample", width) if grows else None)
            prev = width
        self.norm_out = GroupNorm(f"{MAIN}/norm_out", widths[0], groups)
        self.conv_out = Conv2d(f"{MAIN}/conv_out", widths[0], config.latent_channels, zero_init=True)

        self.anchor_in: Optional[Conv2d] = None
        self.anchor_levels: List[_DownLevel] = []
        self.anchor_inject: List[Conv2d] = []
        self.anchor_downsample: List[Optional[Conv2d]] = []
        if config.two_stream:
            self.anchor_in = Conv2d(f"{ANCHOR}/conv_in", config.latent_channels, widths[0])
            prev = widths[0]
            for level, width in enumerate(widths):
                self.anchor_levels.append(_DownLevel(ANCHOR, level, prev, width, 1, level in attend, config))
                self.anchor_inject.append(Conv2d(f"{ANCHOR}/down{level}/inject", width, width, kernel=1, zero_init=True))
                self.anchor_downsample.append(self._downsample_for(ANCHOR, level, width))
                prev = width

    def _downsample_for(self, prefix: str, level: int, width: int) -> Optional[Conv2d]:
        if level + 1 < len(self.sizes) and self.sizes[level + 1] != self.sizes[level]:
            return Conv2d(f"{prefix}/down{level}/downsample", width, width, stride=2)
        return None

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def layers(self) -> List[Layer]:
        layers: List[Layer] = [self.time_fc1, self.time_fc2, self.conv_in, self.norm_out, self.conv_out]
        for level in self.down:
            layers += level.layers()
        layers += [d for d in self.downsample if d is not None]
        layers += self.up_res + [a for a in self.up_attn if a is not None] + [u for u in self.upsample if u is not None]
        if self.anchor_in is not None:
            layers.append(self.anchor_in)
            for level in self.anchor_levels:
                layers += level.layers()
            layers += self.anchor_inject + [d for d in self.anchor_downsample if d is not None]
        return layers

    def specs(self) -> List[ParamSpec]:
        return [spec for layer in self.layers() for spec in layer.specs()]

    def init_params(self, rng: Rng) -> ParamStore:
        store = ParamStore()
        init_specs(self.specs(), store, rng)
        logger.info(
            "Denoiser: initialised %d parameters (%s)",
            store.num_scalars(),
            "two-stream" if self.config.two_stream else "single-stream",
        )
        return store

    def count_params(self) -> int:
        return int(sum(np.prod(spec.shape) for spec in self.specs()))

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _check(self, z_t: Tensor, cond: Conditioning) -> None:
        cfg = self.config
        expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if z_t.ndim != 4 or z_t.shape[1:] != expected:
            raise ShapeError(f"predict_noise: latent {z_t.shape} does not match (N, {', '.join(map(str, expected))})")
        if cond.batch_size != z_t.shape[0]:
            raise ShapeError(f"predict_noise: {cond.batch_size} conditionings for batch of {z_t.shape[0]}")
        if cond.has_anchor and cond.anchor_latent.shape != z_t.shape:
            raise ShapeError(f"predict_noise: anchor {cond.anchor_latent.shape} does not match latent {z_t.shape}")

    def _time(self, store: ParamStore, t: Union[int, np.ndarray], batch: int) -> Tensor:
        steps = np.broadcast_to(np.asarray(t), (batch,))
        features = Tensor(time_embedding(steps, self.config.base_channels))
        return self.time_fc2(store, silu(self.time_fc1(store, features)))

    def _anchor_features(
        self, store: ParamStore, cond: Conditioning, temb: Tensor, context: Tensor, bias: np.ndarray
    ) -> List[Tensor]:
        mask = reshape(Tensor(cond.anchor_mask), (cond.batch_size, 1, 1, 1))
        a = self.anchor_in(store, Tensor(cond.anchor_latent))
        injections = []
        for level, inject, down in zip(self.anchor_levels, self.anchor_inject, self.anchor_downsample):
            a = level(store, a, temb, context, bias)
            injections.append(mul(inject(store, a), mask))
            if down is not None:
                a = down(store, a)
        return injections

    def predict_noise(
        self,
        params: ParamStore,
        z_t: Union[np.ndarray, Tensor],
        t: Union[int, np.ndarray],
        cond: Conditioning,
    ) -> Tensor:
        """eps_hat with the shape of ``z_t``; anchor stream skipped when no anchor is given."""
        z_t = as_tensor(z_t)
        self._check(z_t, cond)
        batch = z_t.shape[0]
        temb = self._time(params, t, batch)
        context = self.text.embed(params, cond.token_ids)
        bias = key_padding_bias(cond.token_ids)

        injections: Optional[List[Tensor]] = None
        if self.anchor_in is not None and cond.has_anchor:
            injections = self._anchor_features(params, cond, temb, context, bias)

        h = self.conv_in(params, z_t)
        skips: List[Tensor] = []
        for level, (block, down) in enumerate(zip(self.down, self.downsample)):
            h = block(params, h, temb, context, bias)
            if injections is not None:
                h = add(h, injections[level])
            skips.append(h)
            if down is not None:
                h = down(params, h)

        last = len(self.down) - 1
        for i, (res, attn, up) in enumerate(zip(self.up_res, self.up_attn, self.upsample)):
            level = last - i
            h = res(params, h, temb)
            if attn is not None:
                h = attn(params, h, context, bias)
            if level != last:
                h = add(h, skips[level])
            if up is not None:
                h = up(params, h)
        return self.conv_out(params, silu(self.norm_out(params, h)))
