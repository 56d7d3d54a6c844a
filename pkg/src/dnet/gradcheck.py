"""Central finite-difference gradient checking in double precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], param: Tensor, step: float = 1e-3,
                       indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored. ``indices`` (flat
    positions) restricts the entries probed; others are left as NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        plus = float(f())
        flat[i] = orig - step
        minus = float(f())
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the finite entries of ``numeric``."""
    mask = np.isfinite(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3,
                    max_entries: int | None = None, rng=None, freeze_pattern: bool = False) -> dict:
    """Compare backprop against central differences for each parameter.

    ``loss_fn`` rebuilds the graph on every call. Returns a mapping from
    parameter position to relative error. With ``max_entries`` only that many
    randomly chosen entries per parameter are probed.

    ``freeze_pattern`` records the ReLU masks and max-pool winners of the
    analytic pass and replays them for every perturbed evaluation, so a step
    that would cross a kink still measures the slope of the recorded piece.
    """
    params = list(params)
    for p in params:
        p.grad = None
    tape = T.PatternTape() if freeze_pattern else None
    if tape is not None:
        inner = loss_fn

        def loss_fn():
            with T.frozen_pattern(tape):
                out = inner()
            tape.replay()
            return out
    loss = loss_fn()
    loss.backward()
    analytic = [np.array(p.grad, dtype=np.float64) if p.grad is not None else np.zeros(p.shape) for p in params]
    rng = rng or np.random.default_rng(0)
    errors = {}
    for i, p in enumerate(params):
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = rng.choice(p.data.size, size=max_entries, replace=False)
        numeric = numerical_gradient(lambda: loss_fn().item(), p, step, idx)
        errors[i] = relative_error(analytic[i], numeric)
    for p in params:
        p.grad = None
    return errors
