from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named trainable tensors, always iterated in lexicographic name order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def __iter__(self) -> Iterator[Tensor]:
        for _, t in self.items():
            yield t

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for name, t in self._params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.astype(self.dtype, copy=True)
            t.zero_grad()

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store at another precision (gradients reset)."""
        other = ParamStore(dtype)
        for name, t in self.items():
            other.add(name, t.data)
        return other
