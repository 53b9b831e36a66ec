"""Linear beta schedule, forward noising and deterministic DDIM steps.

Signal and noise scales follow the variance-preserving reading
alpha_t = sqrt(alpha_bar_t), sigma_t = sqrt(1 - alpha_bar_t).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import InputError, ShapeError

logger = logging.getLogger(__name__)

# t_prev sentinel: the step after t=0 has alpha_bar = 1
TERMINAL = -1
# absorbs float error in strength * steps, e.g. 0.29 * 100 = 28.999999999999996
STRENGTH_EPS = 1e-9

Timestep = Union[int, np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    loss_weights: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at t, with the terminal sentinel mapping to 1."""
        if t == TERMINAL:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t])

    def check_timestep(self, t: Timestep) -> None:
        values = np.asarray(t)
        if values.size == 0 or values.min() < 0 or values.max() >= self.T:
            raise InputError(f"timestep {t} outside [0, {self.T})")

    def weights_at(self, t: Timestep) -> np.ndarray:
        self.check_timestep(t)
        return self.loss_weights[np.asarray(t)]


def make_linear_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    loss_weights: Optional[Sequence[float]] = None,
) -> NoiseSchedule:
    if T < 2:
        raise InputError(f"schedule needs T >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise InputError(f"schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    weights = np.ones(T) if loss_weights is None else np.asarray(loss_weights, dtype=np.float64)
    if weights.shape != (T,) or not (weights > 0).all():
        raise InputError(f"loss_weights must be {T} positive values")
    for array in (betas, alphas, alpha_bars, weights):
        array.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, loss_weights=weights)


def _per_sample(coeff: np.ndarray, ndim: int, dtype: np.dtype) -> np.ndarray:
    coeff = np.asarray(coeff, dtype=dtype)
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape((-1,) + (1,) * (ndim - 1))


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, eps: np.ndarray, t: Timestep) -> np.ndarray:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is an int or one timestep per leading (batch) entry.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"add_noise: x0 {x0.shape} and eps {eps.shape} differ")
    schedule.check_timestep(t)
    alpha_bar = schedule.alpha_bars[np.asarray(t)]
    dtype = np.result_type(x0.dtype, np.float32)
    signal = _per_sample(np.sqrt(alpha_bar), x0.ndim, dtype)
    noise = _per_sample(np.sqrt(1.0 - alpha_bar), x0.ndim, dtype)
    return signal * x0 + noise * eps


def ddim_step(
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """One eta=0 DDIM update from t to t_prev; returns (z_prev, x0_hat)."""
    if not schedule.T > t > t_prev >= TERMINAL:
        raise InputError(f"ddim_step needs T > t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"ddim_step: z_t {z_t.shape} and eps_hat {eps_hat.shape} differ")
    dtype = np.result_type(z_t.dtype, np.float32)
    alpha_bar = schedule.alpha_bar(t)
    alpha_bar_prev = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - dtype.type(np.sqrt(1.0 - alpha_bar)) * eps_hat) / dtype.type(np.sqrt(alpha_bar))
    if t_prev == TERMINAL:
        return x0_hat, x0_hat
    z_prev = dtype.type(np.sqrt(alpha_bar_prev)) * x0_hat + dtype.type(np.sqrt(1.0 - alpha_bar_prev)) * eps_hat
    return z_prev, x0_hat


def ddim_timesteps(schedule: NoiseSchedule, steps: int) -> List[int]:
    """Evenly strided S-step subsequence of [0, T), noisiest first."""
    if not 1 <= steps <= schedule.T:
        raise InputError(f"steps must be in [1, {schedule.T}], got {steps}")
    stride = schedule.T // steps
    return [k * stride for k in reversed(range(steps))]


def strength_to_start(schedule: NoiseSchedule, strength: float, steps: int) -> Tuple[Optional[int], List[int]]:
    """Timesteps to run for a denoising strength.

    Returns the trailing floor(strength * S) entries of the S-step sequence
    (noisiest first) and the first of them as t_start. Strength 0 runs nothing
    and has no start (None).
    """
    if not 0.0 <= strength <= 1.0:
        raise InputError(f"strength must be in [0, 1], got {strength}")
    timesteps = ddim_timesteps(schedule, steps)
    count = min(steps, int(np.floor(strength * steps + STRENGTH_EPS)))
    if count == 0:
        return None, []
    substeps = timesteps[steps - count :]
    return substeps[0], substeps
