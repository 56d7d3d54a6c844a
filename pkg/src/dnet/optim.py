"""ADAM with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import StateError


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one bias-corrected ADAM update in place, then clear grads."""
    params = list(params)
    if len(state.m) != len(params) or len(state.v) != len(params):
        raise StateError(f"optimizer state holds {len(state.m)} slots for {len(params)} parameters")
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} ({p.name or p.shape}) has no gradient")
        if state.m[i].shape != p.shape:
            raise StateError(f"state slot {i} shape {state.m[i].shape} != parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for i, p in enumerate(params):
        g = np.ascontiguousarray(p.grad, dtype=p.dtype).reshape(-1)
        for name in ("m", "v"):
            slot = getattr(state, name)
            if slot[i].dtype != p.dtype or not slot[i].flags.c_contiguous:
                slot[i] = np.ascontiguousarray(slot[i], dtype=p.dtype)
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
        scalars = (p.dtype.type(x) for x in (lr, beta1, beta2, c1, c2, eps))
        _kernels.adam_update(p.data.reshape(-1), g, state.m[i].reshape(-1), state.v[i].reshape(-1), *scalars)
        p.grad = None


class Adam:
    """Convenience wrapper binding a parameter list to its state."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
