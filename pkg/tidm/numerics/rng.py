import hashlib
from typing import Sequence, Tuple, Union

import numpy as np

from ..errors import InputError
from .tensor import Tensor, compute_dtype

_MASK64 = (1 << 64) - 1
_TO_UNIT = 2.0**-53

Shape = Union[int, Sequence[int]]


def _normalize_shape(shape: Shape) -> Tuple[int, ...]:
    dims = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if not dims or any(int(d) < 1 for d in dims):
        raise InputError(f"rng: shape must be non-empty with all dims >= 1, got {list(dims)}")
    return tuple(int(d) for d in dims)


class Rng:
    """Counter-based generator on the Philox-4x64 keystream.

    Draw number ``k`` of a stream depends only on ``(seed, k)``: it reads the
    keystream words ``2k`` and ``2k + 1``. Every uniform, integer or normal
    variate consumes exactly one draw, so ``counter`` always equals the number
    of variates produced so far.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= int(seed) <= _MASK64:
            raise InputError(f"rng: seed must fit in 64 bits, got {seed}")
        if counter < 0:
            raise InputError(f"rng: counter must be non-negative, got {counter}")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def copy(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def derive(self, index: int) -> "Rng":
        """Per-batch-element stream: seed XOR element index."""
        return Rng((self.seed ^ int(index)) & _MASK64)

    def fork(self, label: str) -> "Rng":
        """Independent named stream for a sub-task (init, dropout, eval...)."""
        digest = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "little"))

    # ------------------------------------------------------------------
    # Keystream
    # ------------------------------------------------------------------

    def _words(self, count: int) -> np.ndarray:
        start = 2 * self.counter
        block, offset = divmod(start, 4)
        stream = np.random.Philox(key=self.seed, counter=block)
        return stream.random_raw(offset + 2 * count)[offset:].reshape(count, 2)

    def _unit_pairs(self, count: int) -> np.ndarray:
        words = self._words(count)
        self.counter += count
        # open interval (0, 1): never exactly 0, so log() below is safe
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _TO_UNIT

    # ------------------------------------------------------------------
    # Public API
    # ------------------------------------------------------------------

    def uniform(self, shape: Shape) -> np.ndarray:
        dims = _normalize_shape(shape)
        units = self._unit_pairs(int(np.prod(dims)))
        return units[:, 0].reshape(dims)

    def integers(self, high: int, shape: Shape) -> np.ndarray:
        if high < 1:
            raise InputError(f"rng: integer bound must be >= 1, got {high}")
        values = np.floor(self.uniform(shape) * high).astype(np.int64)
        return np.minimum(values, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def standard_normal(self, shape: Shape) -> np.ndarray:
        """Box-Muller normals, one draw per variate (cosine branch)."""
        dims = _normalize_shape(shape)
        units = self._unit_pairs(int(np.prod(dims)))
        radius = np.sqrt(-2.0 * np.log(units[:, 0]))
        values = radius * np.cos(2.0 * np.pi * units[:, 1])
        return values.reshape(dims).astype(compute_dtype())


def sample_standard_normal(rng: Rng, shape: Shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))
