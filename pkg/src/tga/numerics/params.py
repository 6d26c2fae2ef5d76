"""Named parameter tensors with matching gradient slots."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor

DTYPES = {"float32": np.float32, "float64": np.float64}


class ParameterStore:
    """Owns every learnable array of a model plus one gradient buffer each.

    Initialisation draws from a generator seeded by ``seed`` in registration
    order, so a fixed seed and config reproduce the same parameters.
    """

    def __init__(self, seed: int = 0, precision: str = "float32"):
        if precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
        self.seed = seed
        self.precision = precision
        self.dtype = DTYPES[precision]
        self.rng = np.random.default_rng(seed)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    # registration ---------------------------------------------------------

    def register(self, name: str, value: np.ndarray) -> str:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return name

    def glorot(self, name: str, shape: tuple[int, int]) -> str:
        """Uniform(+-sqrt(6 / (fan_in + fan_out))) for an (out, in) weight."""
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return self.register(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> str:
        return self.register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> str:
        return self.register(name, np.ones(shape))

    def embedding(self, name: str, shape: tuple[int, int], std: float = 0.02) -> str:
        return self.register(name, self.rng.normal(0.0, std, size=shape))

    # access ---------------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def tensor(self, name: str) -> Tensor:
        """A leaf tensor bound to the stored array; gradients route back by name."""
        return Tensor(self.values[name], requires_grad=True, param=name)

    def num_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.values.items() if k.startswith(prefix))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.values.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snapshot: dict[str, np.ndarray]):
        if snapshot.keys() != self.values.keys():
            raise KeyError("snapshot names do not match the store")
        for k, v in snapshot.items():
            self.values[k][...] = v

    def global_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.values.items()}
