"""Parameter containers and initialisers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, get_default_dtype


class Module:
    """Base class holding named parameters as attributes.

    Parameters are :class:`Tensor` attributes with ``requires_grad`` set;
    sub-modules and lists of sub-modules are traversed recursively in attribute
    insertion order, which fixes the parameter naming used by checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    # resample outside two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return param(out * std)


def he_conv(rng: np.random.Generator, k: int, cin: int, cout: int) -> Tensor:
    return param(rng.standard_normal((k, k, cin, cout)) * np.sqrt(2.0 / (k * k * cin)))


def zeros_param(shape) -> Tensor:
    return param(np.zeros(shape))


def ones_param(shape) -> Tensor:
    return param(np.ones(shape))
