"""Parameter containers: named traversal for the optimizer and checkpoints.

Model parameters live in small dataclasses deriving from ParamGroup; the
traversal yields stable dotted names so a checkpoint written today loads
into a model built tomorrow.
"""

from __future__ import annotations

import dataclasses
from typing import Iterator, Tuple

import numpy as np

from .dtypes import float_dtype
from .tensor import Tensor


class ParamGroup:
    """Mixin for dataclasses whose Tensor fields are learnable parameters."""

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            name = prefix + f.name
            if isinstance(v, Tensor):
                yield name, v
            elif isinstance(v, ParamGroup):
                yield from v.named_params(name + ".")
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, ParamGroup):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def require_grad(self) -> None:
        for _, p in self.named_params():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad = None


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(float_dtype()),
                  requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(float_dtype()),
                  requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=float_dtype()), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=float_dtype()), requires_grad=True)


def full_param(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=float_dtype()), requires_grad=True)
