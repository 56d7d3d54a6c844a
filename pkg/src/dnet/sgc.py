"""Stacked self-gated convolution over dynamic k-NN graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .geometry import batched_knn
from .nn import Linear, Module
from .tensor import Tensor

GATE_MODES = ("scalar", "channel")


@dataclass
class SgcConfig:
    widths: tuple = (64, 64, 64, 128)
    k: int = 20
    dynamic_graph: bool = True
    gating: bool = True
    gate: str = "scalar"
    set_width: int = 1024
    transform: bool = True
    transform_per_branch: bool = False
    transform_width: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ParameterError("SGC needs at least one layer")
        if self.k < 1:
            raise ParameterError(f"k must be positive, got {self.k}")
        if self.gate not in GATE_MODES:
            raise ParameterError(f"gate must be one of {GATE_MODES}, got {self.gate!r}")

    @property
    def depth(self) -> int:
        return len(self.widths)


class IndexTrace:
    """Memo for non-differentiable index structures (k-NN graphs, selections).

    The first forward that sees a key computes and stores it; later forwards
    reuse it. Finite-difference checks use this to hold discrete choices
    fixed while weights are perturbed.
    """

    def __init__(self):
        self.store = {}

    def __call__(self, key: str, compute):
        if key not in self.store:
            self.store[key] = compute()
        return self.store[key]


def _graph(trace: Optional[IndexTrace], key: str, compute):
    return compute() if trace is None else trace(key, compute)


def edge_features(f: Tensor, neighbors) -> Tensor:
    """``H[i, j] = f_i (+) (f_{nbr(i, j)} - f_i)``; shape ``... x N x k x 2C``."""
    nbr = np.asarray(getattr(neighbors, "indices", neighbors))
    if nbr.shape[:-1] != f.shape[:-1]:
        raise DimensionError(f"neighbor table {nbr.shape} does not match features {f.shape}")
    k = nbr.shape[-1]
    fj = T.gather_rows(f, nbr)
    fi = T.broadcast_to(T.reshape(f, f.shape[:-1] + (1, f.shape[-1])), fj.shape)
    return T.concat([fi, T.sub(fj, fi)], axis=-1)


class EdgeConv(Module):
    """One convolution: shared linear map on edge features, max over the k
    neighbors, then ReLU.

    For a single linear layer ``W = [W_c; W_d]`` the edge response splits as
    ``f_i (W_c - W_d) + f_j W_d``, so the neighbor max only needs the
    per-point ``f W_d`` term. This is exact, not an approximation.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.cin = cin
        self.mlp = Linear(2 * cin, cout, rng)

    def __call__(self, f: Tensor, neighbors) -> Tensor:
        nbr = np.asarray(getattr(neighbors, "indices", neighbors))
        if f.shape[-1] != self.cin:
            raise DimensionError(f"EdgeConv expects {self.cin} channels, got {f.shape}")
        w = self.mlp.weight
        w_center, w_diff = w[: self.cin], w[self.cin:]
        center = T.matmul(f, T.sub(w_center, w_diff))
        pooled = T.gather_max(T.matmul(f, w_diff), nbr)
        return T.relu(T.add(T.add(center, pooled), self.mlp.bias))


def sgc_layer(f: Tensor, conv: EdgeConv, k: int, layer_index: int, dynamic_graph: bool = True,
              coord_graph=None, trace: Optional[IndexTrace] = None, key: str = "") -> Tensor:
    """Convolution at depth ``layer_index`` (1-based).

    Depth 1 uses ``coord_graph`` (or builds one on ``f``); deeper layers
    rebuild the graph in the current feature space when ``dynamic_graph``.
    """
    n = f.shape[-2]
    k = min(k, n - 1)
    if k < 1:
        raise ParameterError(f"need at least 2 points for a neighborhood, got N={n}")
    if layer_index > 1 and dynamic_graph or coord_graph is None:
        nbr = _graph(trace, f"{key}graph{layer_index}", lambda: batched_knn(f.data, k))
    else:
        nbr = coord_graph
    return conv(f, nbr)


class SelfGate(Module):
    """``theta = sigmoid(MLP(f))`` scaling the layer feature.

    ``scalar`` mode produces one gate per point broadcast over channels;
    ``channel`` produces one per channel. Zero-initialized, so theta starts
    at 0.5.
    """

    def __init__(self, channels: int, mode: str, rng: np.random.Generator):
        if mode not in GATE_MODES:
            raise ParameterError(f"gate must be one of {GATE_MODES}")
        self.mode = mode
        self.mlp = Linear(channels, 1 if mode == "scalar" else channels, rng, zero=True)

    def theta(self, f: Tensor) -> Tensor:
        return T.sigmoid(self.mlp(f))

    def __call__(self, f: Tensor) -> Tensor:
        return T.mul(f, self.theta(f))


def self_gate(f: Tensor, gate: SelfGate) -> Tensor:
    return gate(f)


def set_feature(gated, lift: Linear, weights: Optional[Tensor] = None, keep_per_point: bool = True):
    """Concatenate per-depth features, lift per point, max over points.

    Returns ``(set_feature, per_point)``; ``per_point`` is the lifted
    pre-max feature kept for segmentation (``None`` when not requested,
    which enables the fused pooled backward). ``weights`` (one per point)
    multiplies the lifted features before pooling.
    """
    gated = list(gated)
    n = {g.shape[:-1] for g in gated}
    if len(n) != 1:
        raise DimensionError(f"per-depth features disagree on point count: {[g.shape for g in gated]}")
    cat = T.concat(gated, axis=-1)
    if not keep_per_point:
        squeeze = cat.ndim == 2
        if squeeze:
            cat = T.reshape(cat, (1,) + cat.shape)
            weights = None if weights is None else T.reshape(weights, (1,) + weights.shape)
        values, _ = T.pooled_linear_relu(cat, lift.weight, lift.bias, weights)
        return (T.reshape(values, values.shape[1:]) if squeeze else values), None
    per_point = T.relu(lift(cat))
    pooled_in = per_point if weights is None else T.mul(per_point, T.reshape(weights, weights.shape + (1,)))
    values, _ = T.max_reduce(pooled_in, axis=-2)
    return values, per_point


class InputTransform(Module):
    """Learned 3x3 alignment ``M = I + delta`` estimated from k-NN edge features.

    The final layer is zero-initialized so a fresh transform is the identity.
    """

    def __init__(self, width: int, rng: np.random.Generator):
        self.edge = EdgeConv(3, width, rng)
        self.point = Linear(width, 2 * width, rng)
        self.out = Linear(2 * width, 9, rng, zero=True)

    def matrix(self, xyz: Tensor, neighbors) -> Tensor:
        e = self.edge(xyz, neighbors)
        p = T.relu(self.point(e))
        g, _ = T.max_reduce(p, axis=-2)
        delta = T.reshape(self.out(g), g.shape[:-1] + (3, 3))
        eye = Tensor(np.eye(3), dtype=xyz.dtype)
        return T.add(delta, eye)

    def __call__(self, xyz: Tensor, neighbors):
        m = self.matrix(xyz, neighbors)
        return m, T.matmul(xyz, m)


def input_transform(points: Tensor, k: int, net: InputTransform, trace: Optional[IndexTrace] = None,
                    key: str = "transform"):
    """Returns ``(M, aligned)`` for ``N x 3`` or ``B x N x 3`` coordinates."""
    k = min(k, points.shape[-2] - 1)
    nbr = _graph(trace, key, lambda: batched_knn(points.data, k))
    return net(points, nbr)


class SgcBranch(Module):
    """Feature extractor for one point set: optional input transform,
    stacked convolutions, self-gates and the lifted max-pooled set feature."""

    def __init__(self, din: int, config: SgcConfig, rng: np.random.Generator, with_transform: bool = False):
        self.config = config
        self.din = din
        if with_transform:
            self.transform = InputTransform(config.transform_width, rng)
        widths = (din,) + config.widths
        self.convs = [EdgeConv(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        if config.gating:
            self.gates = [SelfGate(c, config.gate, rng) for c in config.widths]
        self.lift = Linear(sum(config.widths), config.set_width, rng)

    def layer_features(self, feats: Tensor, trace: Optional[IndexTrace] = None, key: str = ""):
        """Per-depth (ungated) convolution outputs."""
        cfg = self.config
        n = feats.shape[-2]
        k = min(cfg.k, n - 1)
        xyz = feats[..., :3] if feats.shape[-1] > 3 else feats
        if hasattr(self, "transform"):
            _, aligned = input_transform(xyz, k, self.transform, trace, key + "transform")
            feats = aligned if feats.shape[-1] == 3 else T.concat([aligned, feats[..., 3:]], axis=-1)
            xyz = aligned
        coord_graph = _graph(trace, key + "graph1", lambda: batched_knn(xyz.data, k))
        outs = []
        f = feats
        for t, conv in enumerate(self.convs, 1):
            f = sgc_layer(f, conv, k, t, cfg.dynamic_graph, coord_graph, trace, key)
            outs.append(f)
        return outs

    def __call__(self, feats: Tensor, weights: Optional[Tensor] = None,
                 trace: Optional[IndexTrace] = None, key: str = "", keep_per_point: bool = False):
        outs = self.layer_features(feats, trace, key)
        if self.config.gating:
            outs = [gate(f) for gate, f in zip(self.gates, outs)]
        return set_feature(outs, self.lift, weights, keep_per_point)
