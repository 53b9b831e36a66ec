from .codec import BaselineCodec, LatentCodec, train_codec
from .conditioning import Conditioning, TextEncoder, Vocabulary, register_placeholder
from .denoiser import Denoiser, time_embedding
from .sampler import ddim_sample, generate, guided_eps
from .schedule import NoiseSchedule, add_noise, ddim_step, ddim_timesteps, make_linear_schedule, strength_to_start
from .trainer import (
    PriorSample,
    finetune_dreambooth,
    generate_prior_set,
    loss_base,
    loss_prior_preservation,
    train_base,
)

__all__ = [
    "BaselineCodec",
    "Conditioning",
    "Denoiser",
    "LatentCodec",
    "NoiseSchedule",
    "PriorSample",
    "TextEncoder",
    "Vocabulary",
    "add_noise",
    "ddim_sample",
    "ddim_step",
    "ddim_timesteps",
    "finetune_dreambooth",
    "generate",
    "generate_prior_set",
    "guided_eps",
    "loss_base",
    "loss_prior_preservation",
    "make_linear_schedule",
    "register_placeholder",
    "strength_to_start",
    "time_embedding",
    "train_base",
    "train_codec",
]
