"""Finite-difference checks over every differentiable op and the full training losses."""

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from ..errors import InputError
from ..models.schemas import CodecConfig, DenoiserConfig, TextConfig
from ..numerics import (
    GradCheckResult,
    ParamStore,
    Rng,
    Tensor,
    attention,
    avg_pool2d,
    conv2d,
    cross_entropy,
    downsample,
    finite_difference_check,
    group_norm,
    linear,
    mse,
    mul,
    silu,
    sum_all,
    take_rows,
    upsample_nearest,
)
from .codec import LatentCodec
from .conditioning import Conditioning, Vocabulary
from .denoiser import Denoiser
from .schedule import make_linear_schedule
from .trainer import init_model_params, loss_base, loss_prior_preservation

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_COORDS = 4
TOLERANCE = 1e-3


def smallest_denoiser_config(two_stream: bool = True) -> Tuple[DenoiserConfig, TextConfig]:
    denoiser = DenoiserConfig(
        latent_channels=4,
        latent_size=6,
        base_channels=8,
        channel_mults=[1, 2],
        blocks_per_level=1,
        attention_levels=[1],
        time_embed_dim=16,
        context_dim=8,
        norm_groups=2,
        two_stream=two_stream,
    )
    return denoiser, TextConfig(seq_len=4, embed_dim=8)


def _jitter(params: ParamStore, rng: Rng, amount: float = 0.1) -> ParamStore:
    """Perturb every entry so zero-initialised layers do not hide gradients."""
    out = params.copy()
    for name, value in params.items():
        out[name] = (value + amount * rng.standard_normal(value.shape)).astype(np.float32)
    return out


def _projected(output: Tensor, rng: Rng) -> Tensor:
    return sum_all(mul(output, Tensor(rng.standard_normal(output.shape))))


OpCase = Tuple[Dict[str, Tuple[int, ...]], Callable[[ParamStore], Tensor]]


def _op_cases() -> Dict[str, OpCase]:
    def leaf(p: ParamStore, name: str) -> Tensor:
        return p.leaf(name)

    labels = np.array([0, 2, 1])
    ids = np.array([[0, 3, 1], [2, 2, 4]])
    key_bias = np.array([[[0.0, 0.0, -1e4, 0.0]], [[0.0, -1e4, 0.0, 0.0]]])
    return {
        "conv2d": (
            {"x": (2, 3, 5, 5), "w": (4, 3, 3, 3), "b": (4,)},
            lambda p: conv2d(leaf(p, "x"), leaf(p, "w"), leaf(p, "b"), stride=1, padding=1),
        ),
        "downsample": (
            {"x": (2, 3, 6, 6), "w": (2, 3, 3, 3), "b": (2,)},
            lambda p: downsample(leaf(p, "x"), leaf(p, "w"), leaf(p, "b")),
        ),
        "linear": (
            {"x": (3, 5), "w": (5, 4), "b": (4,)},
            lambda p: linear(leaf(p, "x"), leaf(p, "w"), leaf(p, "b")),
        ),
        "group_norm": (
            {"x": (2, 4, 3, 3), "gamma": (4,), "beta": (4,)},
            lambda p: group_norm(leaf(p, "x"), leaf(p, "gamma"), leaf(p, "beta"), groups=2),
        ),
        "silu": ({"x": (3, 4)}, lambda p: silu(leaf(p, "x"))),
        "attention": (
            {"q": (2, 3, 4), "k": (2, 4, 4), "v": (2, 4, 5)},
            lambda p: attention(leaf(p, "q"), leaf(p, "k"), leaf(p, "v"), key_bias),
        ),
        "upsample_nearest": ({"x": (1, 2, 3, 3)}, lambda p: upsample_nearest(leaf(p, "x"), 2)),
        "avg_pool2d": ({"x": (1, 2, 4, 4)}, lambda p: avg_pool2d(leaf(p, "x"), 2)),
        "take_rows": ({"table": (5, 3)}, lambda p: take_rows(leaf(p, "table"), ids)),
        "mse": ({"a": (2, 3, 2, 2), "b": (2, 3, 2, 2)}, lambda p: mse(leaf(p, "a"), leaf(p, "b"), np.array([0.5, 2.0]))),
        "cross_entropy": ({"logits": (3, 4)}, lambda p: cross_entropy(leaf(p, "logits"), labels)),
    }


RANDOM_SHAPE_KINDS = ("conv2d", "linear", "group_norm", "attention", "silu", "avg_pool2d", "upsample_nearest", "mse")


def _random_op_case(kind: str, rng: Rng) -> OpCase:
    """One op on freshly drawn small shapes."""

    def dim(low: int, high: int) -> int:
        return low + int(rng.integers(high - low + 1, 1)[0])

    def leaf(p: ParamStore, name: str) -> Tensor:
        return p.leaf(name)

    n, h, w = dim(1, 3), dim(3, 6), dim(3, 6)
    if kind == "conv2d":
        cin, cout, padding = dim(1, 4), dim(1, 4), dim(0, 1)
        shapes = {"x": (n, cin, h, w), "w": (cout, cin, 3, 3), "b": (cout,)}
        return shapes, lambda p: conv2d(leaf(p, "x"), leaf(p, "w"), leaf(p, "b"), padding=padding)
    if kind == "linear":
        fan_in, fan_out = dim(1, 6), dim(1, 6)
        shapes = {"x": (n, fan_in), "w": (fan_in, fan_out), "b": (fan_out,)}
        return shapes, lambda p: linear(leaf(p, "x"), leaf(p, "w"), leaf(p, "b"))
    if kind == "group_norm":
        groups = dim(1, 3)
        channels = groups * dim(1, 3)
        shapes = {"x": (n, channels, h, w), "gamma": (channels,), "beta": (channels,)}
        return shapes, lambda p: group_norm(leaf(p, "x"), leaf(p, "gamma"), leaf(p, "beta"), groups=groups)
    if kind == "attention":
        queries, keys, width, values = dim(1, 5), dim(1, 5), dim(1, 6), dim(1, 6)
        shapes = {"q": (n, queries, width), "k": (n, keys, width), "v": (n, keys, values)}
        return shapes, lambda p: attention(leaf(p, "q"), leaf(p, "k"), leaf(p, "v"))
    if kind == "silu":
        return {"x": (n, dim(1, 8))}, lambda p: silu(leaf(p, "x"))
    if kind == "avg_pool2d":
        factor = dim(1, 3)
        shapes = {"x": (n, dim(1, 3), factor * dim(1, 3), factor * dim(1, 3))}
        return shapes, lambda p: avg_pool2d(leaf(p, "x"), factor)
    if kind == "upsample_nearest":
        factor = dim(1, 3)
        return {"x": (n, dim(1, 3), h, w)}, lambda p: upsample_nearest(leaf(p, "x"), factor)
    if kind == "mse":
        shape = (n, dim(1, 3), h, w)
        weights = rng.uniform(n) + 0.5
        return {"a": shape, "b": shape}, lambda p: mse(leaf(p, "a"), leaf(p, "b"), weights)
    raise InputError(f"gradcheck: unknown op kind {kind!r}")


def check_random_shapes(seed: int = 0, count: int = 24, h: float = DEFAULT_STEP) -> Dict[str, GradCheckResult]:
    """Finite-difference checks of the core ops on ``count`` randomly drawn shapes."""
    results: Dict[str, GradCheckResult] = {}
    root = Rng(seed).fork("random_shapes")
    for i in range(count):
        kind = RANDOM_SHAPE_KINDS[i % len(RANDOM_SHAPE_KINDS)]
        rng = root.derive(i)
        shapes, op = _random_op_case(kind, rng)
        params = ParamStore({key: rng.standard_normal(shape) for key, shape in shapes.items()})
        projection_seed = rng.fork("projection").seed

        def f(p: ParamStore, op=op, projection_seed=projection_seed) -> Tensor:
            out = op(p)
            return out if out.ndim == 0 else _projected(out, Rng(projection_seed))

        results[f"{kind}#{i}"] = finite_difference_check(f, params, h=h, seed=seed)
        logger.debug("GradCheck: %s#%d shapes %s", kind, i, shapes)
    return results


def check_ops(seed: int = 0, h: float = DEFAULT_STEP) -> Dict[str, GradCheckResult]:
    results: Dict[str, GradCheckResult] = {}
    root = Rng(seed)
    for name, (shapes, op) in _op_cases().items():
        rng = root.fork(f"op/{name}")
        params = ParamStore({key: rng.standard_normal(shape) for key, shape in shapes.items()})
        projection_seed = rng.fork("projection").seed

        def f(p: ParamStore, op=op, projection_seed=projection_seed) -> Tensor:
            out = op(p)
            return out if out.ndim == 0 else _projected(out, Rng(projection_seed))

        results[name] = finite_difference_check(f, params, h=h, seed=seed)
    return results


def _loss_fixture(seed: int, two_stream: bool = True):
    den_cfg, text_cfg = smallest_denoiser_config(two_stream)
    denoiser = Denoiser(den_cfg, text_cfg)
    vocab = Vocabulary.for_grammar(3, 2)
    root = Rng(seed)
    params = _jitter(init_model_params(denoiser, vocab, root), root.fork("jitter"))
    schedule = make_linear_schedule()
    data_rng = root.fork("data")
    z0 = data_rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    anchor = data_rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    ids = vocab.tokenize_batch(["ident0 meets ident1 in bg0", "ident2 shakes"], text_cfg.seq_len)
    cond = Conditioning(ids, anchor if two_stream else None, np.array([1.0, 0.0]) if two_stream else None)
    return denoiser, params, schedule, z0, cond


def check_losses(
    seed: int = 0, h: float = DEFAULT_STEP, max_coords: Optional[int] = DEFAULT_COORDS
) -> Dict[str, GradCheckResult]:
    results: Dict[str, GradCheckResult] = {}
    denoiser, params, schedule, z0, cond = _loss_fixture(seed)
    noise_seed = Rng(seed).fork("noise").seed

    def base(p: ParamStore) -> Tensor:
        return loss_base(denoiser, p, schedule, z0, cond, Rng(noise_seed))

    def prior(p: ParamStore) -> Tensor:
        return loss_prior_preservation(
            denoiser, p, schedule, (z0, cond), (z0[::-1].copy(), cond.select(np.array([1, 0]))), 0.7, Rng(noise_seed)
        )

    results["loss_base"] = finite_difference_check(base, params, h=h, max_coords_per_param=max_coords, seed=seed)
    results["loss_prior_preservation"] = finite_difference_check(
        prior, params, h=h, max_coords_per_param=max_coords, seed=seed
    )

    codec = LatentCodec(CodecConfig(channels=[4, 8], latent_channels=4, norm_groups=2))
    codec_rng = Rng(seed).fork("codec")
    codec_params = _jitter(codec.init_params(codec_rng), codec_rng.fork("jitter"))
    images = np.tanh(codec_rng.standard_normal((2, 3, 8, 8))).astype(np.float32)

    def reconstruction(p: ParamStore) -> Tensor:
        return mse(codec.decode_tensor(p, codec.encode_tensor(p, Tensor(images))), images)

    results["codec_reconstruction"] = finite_difference_check(
        reconstruction, codec_params, h=h, max_coords_per_param=max_coords, seed=seed
    )
    return results


def run_gradcheck_suite(
    seed: int = 0, h: float = DEFAULT_STEP, max_coords: Optional[int] = DEFAULT_COORDS
) -> Dict[str, GradCheckResult]:
    results = check_ops(seed, h)
    results.update(check_random_shapes(seed, h=h))
    results.update(check_losses(seed, h, max_coords))
    for name, result in results.items():
        logger.info("GradCheck: %-24s max rel err %.3e (%d coords)", name, result.max_rel_error, result.coordinates)
    return results
