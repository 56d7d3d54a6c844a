"""Parameter containers and layer building blocks."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-based parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set; child
    modules are walked recursively, lists of modules are supported. Names
    are dotted attribute paths and are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
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

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((din, dout)) if zero else xavier_uniform(rng, din, dout)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    @property
    def din(self) -> int:
        return self.weight.shape[0]

    @property
    def dout(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with ReLU between (and optionally after) them."""

    def __init__(self, widths, rng, final_relu: bool = False, zero_last: bool = False):
        widths = list(widths)
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(widths) - 2)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.final_relu = final_relu

    def __call__(self, x: Tensor, dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = T.relu(x)
                if i < last and dropout:
                    x = T.dropout(x, dropout, training, rng)
        return x
