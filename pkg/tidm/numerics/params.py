import hashlib
import re
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import InputError
from .tensor import Tensor

PARAM_NAME = re.compile(r"^[A-Za-z0-9_.-]+(/[A-Za-z0-9_.-]+)*$")


class ParamStore:
    """Named float arrays (``/``-separated paths) plus the optimizer step count.

    Iteration is always in lexicographic name order. Arrays are replaced, never
    modified in place, so tensors already on a tape keep their values.
    """

    def __init__(self, entries: Optional[Mapping[str, np.ndarray]] = None, step_count: int = 0):
        self._entries: Dict[str, np.ndarray] = {}
        self.step_count = int(step_count)
        for name, value in (entries or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if not PARAM_NAME.match(name):
            raise InputError(f"ParamStore: invalid parameter name {name!r}")
        array = np.asarray(value)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self._entries[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"ParamStore: no parameter named {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> List[str]:
        return sorted(self._entries)

    def items(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, self._entries[name]) for name in self.names()]

    def leaf(self, name: str) -> Tensor:
        return Tensor.parameter(name, self[name])

    def subtree(self, prefix: str) -> "ParamStore":
        head = prefix.rstrip("/") + "/"
        return ParamStore({k: v for k, v in self._entries.items() if k.startswith(head)}, self.step_count)

    def update(self, other: "ParamStore") -> None:
        for name, value in other.items():
            self[name] = value

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._entries.items()}, self.step_count)

    def astype(self, dtype: type) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._entries.items()}, self.step_count)

    def num_scalars(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self._entries.items() if k.startswith(prefix)))

    def checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=8)
        for name, value in self.items():
            digest.update(name.encode())
            digest.update(repr(value.shape).encode())
            digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return digest.hexdigest()

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[name].shape == other[name].shape
            and np.ascontiguousarray(self[name]).tobytes() == np.ascontiguousarray(other[name]).tobytes()
            for name in self.names()
        )
