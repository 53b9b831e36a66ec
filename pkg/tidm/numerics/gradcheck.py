"""Central finite-difference checks for the gradient tape."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..errors import InputError, ShapeError
from .params import ParamStore
from .rng import Rng
from .tensor import Tensor, backpropagate, float64_precision

logger = logging.getLogger(__name__)

ScalarFn = Callable[[ParamStore], Tensor]

DENOMINATOR_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: Dict[str, float] = field(default_factory=dict)
    coordinates: int = 0

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_rel_error <= tolerance


def _coordinates(shape: Tuple[int, ...], limit: Optional[int], rng: Rng) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    if limit is None or size <= limit:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.permutation(size)[:limit])
    return [tuple(int(i) for i in np.unravel_index(k, shape)) for k in flat]


def finite_difference_check(
    f: ScalarFn,
    params: ParamStore,
    h: float = 1e-3,
    names: Optional[List[str]] = None,
    max_coords_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Worst relative error between analytic and central-difference gradients.

    Both sides are evaluated in 64-bit on a 64-bit copy of ``params``. The
    relative error of a coordinate is |a - n| / max(|a|, |n|, 1e-8).
    ``max_coords_per_param`` samples a seeded subset of coordinates for large
    parameters.
    """
    if not h > 0:
        raise InputError(f"finite_difference_check: step h must be > 0, got {h}")
    work = params.astype(np.float64)
    selected = names if names is not None else work.names()
    rng = Rng(seed)
    result = GradCheckResult(max_rel_error=0.0)

    with float64_precision():
        loss = f(work)
        if loss.ndim != 0:
            raise ShapeError(f"finite_difference_check: f must return a scalar, got shape {loss.shape}")
        analytic = backpropagate(loss, work)

        for name in selected:
            original = work[name]
            worst = 0.0
            for idx in _coordinates(original.shape, max_coords_per_param, rng):
                plus = original.copy()
                plus[idx] += h
                work[name] = plus
                f_plus = f(work).item()
                minus = original.copy()
                minus[idx] -= h
                work[name] = minus
                f_minus = f(work).item()
                work[name] = original

                numeric = (f_plus - f_minus) / (2 * h)
                exact = float(analytic[name].data[idx])
                denom = max(abs(exact), abs(numeric), DENOMINATOR_FLOOR)
                worst = max(worst, abs(exact - numeric) / denom)
                result.coordinates += 1
            result.per_param[name] = worst
            result.max_rel_error = max(result.max_rel_error, worst)

    logger.debug(
        "GradCheck: %d coordinates, max relative error %.3e", result.coordinates, result.max_rel_error
    )
    return result
