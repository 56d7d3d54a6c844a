"""Channel-wise learnable fusion of set features into one global feature."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .nn import MLP, Module
from .tensor import Tensor

FUSION_MODES = ("learned", "max", "mean", "concat")


class FusionParams(Module):
    """One descriptor-mapping MLP (``width -> hidden -> width``) per branch."""

    def __init__(self, n_branches: int, width: int, hidden: int, rng: np.random.Generator):
        self.mlps = [MLP((width, hidden, width), rng) for _ in range(n_branches)]

    def descriptors(self, feats: Sequence[Tensor]) -> list:
        if len(feats) != len(self.mlps):
            raise DimensionError(f"{len(feats)} set features for {len(self.mlps)} mapping networks")
        return [mlp(f) for mlp, f in zip(self.mlps, feats)]


def _check_widths(feats):
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise DimensionError(f"set features disagree in width: {[f.shape for f in feats]}")


def fusion_weights(feats: Sequence[Tensor], params: FusionParams) -> Tensor:
    """Per-channel softmax across branches of the mapped descriptors.

    Output has a leading branch axis: ``M x ... x C`` with each channel's
    weights summing to one.
    """
    feats = list(feats)
    _check_widths(feats)
    omega = T.stack(params.descriptors(feats), axis=0)
    return T.softmax(omega, axis=0)


def fuse(weights: Tensor, feats: Sequence[Tensor]) -> Tensor:
    """Weighted sum ``f_g[c] = sum_m psi[m, c] * f_m[c]``."""
    feats = list(feats)
    _check_widths(feats)
    if weights.shape != (len(feats),) + feats[0].shape:
        raise DimensionError(f"weights {weights.shape} do not match {len(feats)} features of {feats[0].shape}")
    return T.sum_(T.mul(weights, T.stack(feats, axis=0)), axis=0)


def combine(feats: Sequence[Tensor], mode: str, params: FusionParams = None):
    """Global feature under a fusion mode; returns ``(f_g, psi or None)``."""
    feats = list(feats)
    if mode == "learned":
        psi = fusion_weights(feats, params)
        return fuse(psi, feats), psi
    _check_widths(feats)
    if mode == "max":
        values, _ = T.max_reduce(T.stack(feats, axis=0), axis=0)
        return values, None
    if mode == "mean":
        return T.mean(T.stack(feats, axis=0), axis=0), None
    if mode == "concat":
        return T.concat(feats, axis=-1), None
    raise ParameterError(f"fusion must be one of {FUSION_MODES}, got {mode!r}")
