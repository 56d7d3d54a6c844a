"""Self-attentive point searching: per-point distinction scores and the
split into high / low distinctive point sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .geometry import PointCloud
from .nn import Linear, Module
from .tensor import Tensor

NORMALIZE_AXES = ("column", "row")


@dataclass
class DistinctionResult:
    alpha: np.ndarray
    idx_high: np.ndarray
    idx_low: np.ndarray


class SpsParams(Module):
    """Two projections into a shared ``width``-dimensional attention space."""

    def __init__(self, din: int, width: int, rng: np.random.Generator):
        self.g = Linear(din, width, rng)
        self.h = Linear(din, width, rng)

    @property
    def width(self) -> int:
        return self.g.dout


def attentive_scores(points: Tensor, params: SpsParams, normalize_axis: str = "column") -> Tensor:
    """Distinction score per point, differentiable in both projections.

    With ``s[i, j] = g(p_i) . h(p_j)``, attention is normalized over the first
    index for each fixed ``j`` (``column``) and each point's score is the
    attention mass it receives: ``alpha_i = sum_j softmax_i(s[:, j])``, so the
    scores sum to N. ``row`` normalizes over ``j`` instead and sums the mass
    received on the ``h`` side. Accepts ``N x D`` or batched ``B x N x D``.
    """
    if points.shape[-2] < 2:
        raise ParameterError(f"attentive_scores needs N >= 2, got N={points.shape[-2]}")
    if normalize_axis not in NORMALIZE_AXES:
        raise ParameterError(f"normalize_axis must be one of {NORMALIZE_AXES}")
    g = params.g(points)
    h = params.h(points)
    s = T.matmul(g, T.swapaxes(h, -1, -2))  # s[..., i, j]
    if normalize_axis == "column":
        beta = T.softmax(s, axis=-2)
        return T.sum_(beta, axis=-1)
    beta = T.softmax(s, axis=-1)
    return T.sum_(beta, axis=-2)


def select_distinctive(alpha, n1: int):
    """Indices of the ``n1`` largest and ``n1`` smallest scores.

    Both lists are ordered by rank; equal scores rank by lower index.
    Batched input (``B x N``) gives ``B x n1`` outputs.
    """
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)
    n = a.shape[-1]
    if not 0 < n1 <= n:
        raise ParameterError(f"N1={n1} must lie in [1, N={n}]")
    high = np.argsort(-a, axis=-1, kind="stable")[..., :n1]
    low = np.argsort(a, axis=-1, kind="stable")[..., :n1]
    return high, low


def distinction(points: Tensor, params: SpsParams, n1: int, normalize_axis: str = "column"):
    """Scores plus selection; returns ``(alpha_tensor, DistinctionResult)``."""
    alpha = attentive_scores(points, params, normalize_axis)
    high, low = select_distinctive(alpha, n1)
    return alpha, DistinctionResult(alpha.data.copy(), high, low)


def split_sets(cloud: PointCloud, result: DistinctionResult):
    """Gather the high and low distinctive point sets (coordinates and normals)."""
    n = len(cloud)
    for name, idx in (("idx_high", result.idx_high), ("idx_low", result.idx_low)):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"{name} holds an index outside [0, {n})")
    return cloud.subset(result.idx_high), cloud.subset(result.idx_low)
