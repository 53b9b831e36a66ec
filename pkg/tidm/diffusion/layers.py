"""Building blocks shared by the codec, the denoiser and the probe.

Layers describe architecture only: parameter names and shapes. Values live in
a ``ParamStore`` and are read as tape leaves on every call.
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from ..numerics import (
    ParamStore,
    Rng,
    Tensor,
    add,
    attention,
    conv2d,
    downsample,
    group_norm,
    linear,
    reshape,
    silu,
    transpose,
    upsample_nearest,
)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    init: str = "fan_in"  # fan_in | zeros | ones | normal
    fan_in: int = 1
    std: float = 0.02

    def initial(self, rng: Rng) -> np.ndarray:
        if self.init == "zeros":
            return np.zeros(self.shape, dtype=np.float32)
        if self.init == "ones":
            return np.ones(self.shape, dtype=np.float32)
        scale = self.std if self.init == "normal" else 1.0 / np.sqrt(self.fan_in)
        return (rng.standard_normal(self.shape) * np.float32(scale)).astype(np.float32)


def init_specs(specs: Iterable[ParamSpec], store: ParamStore, rng: Rng) -> None:
    """Initialise in name order so the draw sequence never depends on layout code."""
    for spec in sorted(specs, key=lambda s: s.name):
        store[spec.name] = spec.initial(rng)


class Layer:
    def specs(self) -> List[ParamSpec]:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, zero_init: bool = False):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.zero_init = zero_init

    def specs(self) -> List[ParamSpec]:
        fan_in = self.in_ch * self.kernel * self.kernel
        return [
            ParamSpec(
                f"{self.name}/w",
                (self.out_ch, self.in_ch, self.kernel, self.kernel),
                "zeros" if self.zero_init else "fan_in",
                fan_in,
            ),
            ParamSpec(f"{self.name}/b", (self.out_ch,), "zeros"),
        ]

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        weight = store.leaf(f"{self.name}/w")
        bias = store.leaf(f"{self.name}/b")
        if self.stride == 2:
            return downsample(x, weight, bias)
        return conv2d(x, weight, bias, stride=self.stride, padding=self.kernel // 2)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, bias: bool = True, zero_init: bool = False):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias
        self.zero_init = zero_init

    def specs(self) -> List[ParamSpec]:
        specs = [
            ParamSpec(
                f"{self.name}/w",
                (self.in_features, self.out_features),
                "zeros" if self.zero_init else "fan_in",
                self.in_features,
            )
        ]
        if self.bias:
            specs.append(ParamSpec(f"{self.name}/b", (self.out_features,), "zeros"))
        return specs

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        bias = store.leaf(f"{self.name}/b") if self.bias else None
        return linear(x, store.leaf(f"{self.name}/w"), bias)


class GroupNorm(Layer):
    def __init__(self, name: str, channels: int, groups: int):
        self.name = name
        self.channels = channels
        self.groups = min(groups, channels)

    def specs(self) -> List[ParamSpec]:
        return [
            ParamSpec(f"{self.name}/gamma", (self.channels,), "ones"),
            ParamSpec(f"{self.name}/beta", (self.channels,), "zeros"),
        ]

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return group_norm(x, store.leaf(f"{self.name}/gamma"), store.leaf(f"{self.name}/beta"), self.groups)


class ResBlock(Layer):
    """GroupNorm-SiLU-conv twice, optional time-embedding bias, 1x1 skip when widths differ."""

    def __init__(self, name: str, in_ch: int, out_ch: int, groups: int, temb_dim: Optional[int] = None):
        self.name = name
        self.norm1 = GroupNorm(f"{name}/norm1", in_ch, groups)
        self.conv1 = Conv2d(f"{name}/conv1", in_ch, out_ch)
        self.norm2 = GroupNorm(f"{name}/norm2", out_ch, groups)
        self.conv2 = Conv2d(f"{name}/conv2", out_ch, out_ch)
        self.temb = Linear(f"{name}/temb", temb_dim, out_ch) if temb_dim else None
        self.skip = Conv2d(f"{name}/skip", in_ch, out_ch, kernel=1) if in_ch != out_ch else None

    def specs(self) -> List[ParamSpec]:
        layers: List[Layer] = [self.norm1, self.conv1, self.norm2, self.conv2]
        layers += [layer for layer in (self.temb, self.skip) if layer is not None]
        return [spec for layer in layers for spec in layer.specs()]

    def __call__(self, store: ParamStore, x: Tensor, temb: Optional[Tensor] = None) -> Tensor:
        h = self.conv1(store, silu(self.norm1(store, x)))
        if self.temb is not None and temb is not None:
            bias = self.temb(store, silu(temb))
            h = add(h, reshape(bias, bias.shape + (1, 1)))
        h = self.conv2(store, silu(self.norm2(store, h)))
        shortcut = self.skip(store, x) if self.skip is not None else x
        return add(shortcut, h)


class CrossAttention(Layer):
    """Queries from spatial features, keys/values from the text context; residual output."""

    def __init__(self, name: str, channels: int, context_dim: int, groups: int):
        self.name = name
        self.norm = GroupNorm(f"{name}/norm", channels, groups)
        self.q = Linear(f"{name}/q", channels, channels, bias=False)
        self.k = Linear(f"{name}/k", context_dim, channels, bias=False)
        self.v = Linear(f"{name}/v", context_dim, channels, bias=False)
        self.out = Linear(f"{name}/out", channels, channels)

    def specs(self) -> List[ParamSpec]:
        return [spec for layer in (self.norm, self.q, self.k, self.v, self.out) for spec in layer.specs()]

    def __call__(
        self, store: ParamStore, x: Tensor, context: Tensor, key_bias: Optional[np.ndarray] = None
    ) -> Tensor:
        n, c, h, w = x.shape
        tokens = transpose(reshape(self.norm(store, x), (n, c, h * w)), (0, 2, 1))
        attended = attention(self.q(store, tokens), self.k(store, context), self.v(store, context), key_bias)
        out = transpose(self.out(store, attended), (0, 2, 1))
        return add(x, reshape(out, (n, c, h, w)))


class Upsample(Layer):
    def __init__(self, name: str, channels: int):
        self.conv = Conv2d(f"{name}/conv", channels, channels)

    def specs(self) -> List[ParamSpec]:
        return self.conv.specs()

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return self.conv(store, upsample_nearest(x, 2))
