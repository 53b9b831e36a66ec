import logging
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from ..errors import InputError
from .params import ParamStore
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment gradient descent (beta1=0.9, beta2=0.999, eps=1e-8).

    ``trainable`` selects which parameters move; ``row_masks`` restricts an
    embedding table to the rows where the mask is 1. Masked rows keep zero
    moments, so their values stay bitwise unchanged.
    """

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        trainable: Optional[Callable[[str], bool]] = None,
        row_masks: Optional[Mapping[str, np.ndarray]] = None,
    ):
        if learning_rate < 0:
            raise InputError(f"Adam: learning rate must be >= 0, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.trainable = trainable or (lambda name: True)
        self.row_masks = dict(row_masks or {})
        self.steps = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, Tensor]) -> None:
        self.steps += 1
        f32 = np.float32
        b1, b2 = f32(self.beta1), f32(self.beta2)
        correction1 = f32(1.0 - self.beta1**self.steps)
        correction2 = f32(1.0 - self.beta2**self.steps)
        lr, eps = f32(self.learning_rate), f32(self.eps)
        for name in sorted(grads):
            if name not in params or not self.trainable(name):
                continue
            g = grads[name].data.astype(f32)
            if name in self.row_masks:
                g = g * self.row_masks[name].astype(f32).reshape((-1,) + (1,) * (g.ndim - 1))
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
            params[name] = params[name] - update
        params.step_count += 1
