"""Pieces shared by every training loop: minibatch order, metrics log, divergence handling."""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from ..errors import NumericalError, TrainingDivergedError
from ..numerics import Rng

logger = logging.getLogger(__name__)


def minibatches(n: int, batch_size: int, rng: Rng) -> List[np.ndarray]:
    """Index batches over a fresh permutation of ``range(n)``; last batch may be short."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainingLog:
    """Per-step lines ``step=<k> loss=<v> lr=<lr>`` plus per-epoch summaries.

    Lines are appended to ``path`` when one is given.
    """

    component: str
    path: Optional[str] = None
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    eval_losses: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.path:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)

    def step(self, step: int, loss: float, learning_rate: float) -> None:
        self.step_losses.append(loss)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write("step=%d loss=%.6f lr=%g\n" % (step, loss, learning_rate))

    def epoch(self, epoch: int, mean_loss: float, eval_loss: Optional[float] = None) -> None:
        self.epoch_losses.append(mean_loss)
        if eval_loss is None:
            logger.info("%s: epoch %d loss=%.5f", self.component, epoch, mean_loss)
            return
        self.eval_losses.append(eval_loss)
        logger.info("%s: epoch %d loss=%.5f eval_loss=%.6f", self.component, epoch, mean_loss, eval_loss)

    @property
    def final_loss(self) -> float:
        if self.eval_losses:
            return self.eval_losses[-1]
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


@contextmanager
def divergence_guard(component: str, epoch: int, step: int) -> Iterator[None]:
    """Re-raise non-finite values as ``TrainingDivergedError`` with the position."""
    try:
        yield
    except TrainingDivergedError:
        raise
    except NumericalError as exc:
        logger.error("%s: diverged at epoch %d step %d: %s", component, epoch, step, exc)
        raise TrainingDivergedError(f"{component}: diverged at epoch {epoch}, step {step}: {exc}") from exc


def check_loss(component: str, value: float, epoch: int, step: int) -> float:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{component}: loss is {value} at epoch {epoch}, step {step}")
    return value
