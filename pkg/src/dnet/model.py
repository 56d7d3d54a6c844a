"""The assembled network: distinctive point searching, three feature
branches, channel-wise fusion and task heads, plus loss and training step."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ParameterError
from .fusion import FUSION_MODES, FusionParams, combine
from .geometry import PointCloud, batched_fps
from .nn import MLP, Module
from .optim import AdamState, adam_step
from .sgc import IndexTrace, InputTransform, SgcBranch, SgcConfig, input_transform
from .sps import NORMALIZE_AXES, DistinctionResult, SpsParams, attentive_scores, select_distinctive
from .tensor import Tensor

SET_NAMES = ("P_R", "P_H", "P_L")
SAMPLING_MODES = ("sps", "fps", "random")
TASKS = ("classify", "segment")
_BRANCH_ATTR = {"P_R": "raw", "P_H": "high", "P_L": "low"}


@dataclass
class SpsConfig:
    width: int = 64
    normalize_axis: str = "column"

    def __post_init__(self):
        if self.normalize_axis not in NORMALIZE_AXES:
            raise ConfigError(f"sps.normalize_axis must be one of {NORMALIZE_AXES}")


def parse_sets(value) -> tuple:
    """Accept ``("P_R", "P_H")``, ``"P_R+P_H"`` or ``"ALL"``; canonical order."""
    if not isinstance(value, str):
        value = "+".join(value)
    value = SET_NAMES if value.strip().upper() == "ALL" else value.replace(",", "+").split("+")
    names = {v.strip() for v in value if v.strip()}
    unknown = names - set(SET_NAMES)
    if unknown or not names:
        raise ConfigError(f"sets must be a non-empty subset of {SET_NAMES}, got {sorted(names)}")
    return tuple(s for s in SET_NAMES if s in names)


def sets_label(sets) -> str:
    sets = parse_sets(sets)
    return "ALL" if sets == SET_NAMES else "+".join(sets)


@dataclass
class ModelConfig:
    num_classes: int = 8
    n1: Optional[int] = None
    n1_ratio: float = 0.3125
    use_normals: bool = False
    sampling: str = "sps"
    fusion: str = "learned"
    fusion_hidden: int = 256
    sets: tuple = SET_NAMES
    head_widths: tuple = (512, 256)
    dropout: float = 0.5
    task: str = "classify"
    num_parts: int = 2
    seg_widths: tuple = (256, 128)
    seed: int = 0
    sps: SpsConfig = field(default_factory=SpsConfig)
    sgc: SgcConfig = field(default_factory=SgcConfig)

    def __post_init__(self):
        if isinstance(self.sps, dict):
            self.sps = SpsConfig(**self.sps)
        if isinstance(self.sgc, dict):
            self.sgc = SgcConfig(**self.sgc)
        self.sets = parse_sets(self.sets)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        self.seg_widths = tuple(int(w) for w in self.seg_widths)
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "segment" and "P_R" not in self.sets:
            raise ConfigError("segmentation needs the raw-cloud branch P_R")
        if self.num_classes < 1 or self.num_parts < 1:
            raise ConfigError("class and part counts must be positive")
        if not 0 < self.n1_ratio <= 1:
            raise ConfigError(f"n1_ratio must lie in (0, 1], got {self.n1_ratio}")

    @property
    def in_channels(self) -> int:
        return 6 if self.use_normals else 3

    @property
    def uses_selection(self) -> bool:
        return "P_H" in self.sets or "P_L" in self.sets

    def n1_for(self, n_points: int) -> int:
        n1 = self.n1 if self.n1 is not None else int(np.floor(self.n1_ratio * n_points + 0.5))
        return max(1, min(n1, n_points))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["sps"] = SpsConfig(**d.get("sps", {}))
        d["sgc"] = SgcConfig(**d.get("sgc", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    logits: Tensor
    alpha: Optional[Tensor] = None
    selection: Optional[DistinctionResult] = None
    psi: Optional[Tensor] = None
    set_features: dict = field(default_factory=dict)
    global_feature: Optional[Tensor] = None


def normalize_batch(points: np.ndarray) -> np.ndarray:
    """Unit-sphere normalization of the coordinate columns of each cloud."""
    out = np.array(points, copy=True)
    xyz = out[..., :3]
    xyz -= xyz.mean(axis=-2, keepdims=True)
    r = np.sqrt((xyz ** 2).sum(-1)).max(axis=-1)
    if np.any(r <= 1e-12):
        raise ParameterError("a cloud in the batch has all points coincident")
    xyz /= r[..., None, None]
    return out


class DNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        sgc = config.sgc
        din = config.in_channels
        if sgc.transform and not sgc.transform_per_branch:
            self.transform = InputTransform(sgc.transform_width, rng)
        if config.sampling == "sps" and config.uses_selection:
            self.sps = SpsParams(din, config.sps.width, rng)
        for name in config.sets:
            setattr(self, _BRANCH_ATTR[name], SgcBranch(
                din, sgc, rng, with_transform=sgc.transform and sgc.transform_per_branch))
        if config.fusion == "learned":
            self.fusion = FusionParams(len(config.sets), sgc.set_width, config.fusion_hidden, rng)
        gw = self.global_width
        if config.task == "classify":
            self.head = MLP((gw,) + config.head_widths + (config.num_classes,), rng)
        else:
            self.head = MLP((sgc.set_width + gw,) + config.seg_widths + (config.num_parts,), rng)

    @property
    def global_width(self) -> int:
        w = self.config.sgc.set_width
        return w * len(self.config.sets) if self.config.fusion == "concat" else w

    def branch(self, name: str) -> SgcBranch:
        return getattr(self, _BRANCH_ATTR[name])

    # -- forward -------------------------------------------------------------
    def _as_batch(self, points) -> tuple:
        if isinstance(points, PointCloud):
            points = points.features(self.config.use_normals)
        arr = np.asarray(points.data if isinstance(points, Tensor) else points)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        if arr.shape[-1] != self.config.in_channels:
            raise ConfigError(f"model expects {self.config.in_channels} input channels, got {arr.shape[-1]}")
        return arr, single

    def select(self, feats: Tensor, xyz: Tensor, n1: int, rng, trace) -> tuple:
        """Return ``(alpha, idx_high, idx_low)`` for the configured sampling."""
        mode = self.config.sampling
        n = feats.shape[-2]
        trace = trace if trace is not None else IndexTrace()
        if mode == "sps":
            alpha = attentive_scores(feats, self.sps, self.config.sps.normalize_axis)
            high, low = trace("selection", lambda: select_distinctive(alpha.data, n1))
            return alpha, high, low
        m = min(n, 2 * n1)
        if mode == "fps":
            order = trace("selection", lambda: batched_fps(xyz.data, m))
        else:
            r = rng if rng is not None else np.random.default_rng(0)
            order = trace("selection", lambda: np.stack([r.permutation(n)[:m] for _ in range(feats.shape[0])]))
        return None, order[:, :n1], order[:, m - n1:]

    def forward(self, points, training: bool = False, rng=None, trace: Optional[IndexTrace] = None,
                normalize: bool = True) -> ForwardResult:
        """Forward pass over one cloud (``N x D``) or a batch (``B x N x D``).

        ``rng`` drives dropout and random sampling; ``trace`` memoizes k-NN
        graphs and selections (see :class:`IndexTrace`).
        """
        cfg = self.config
        arr, single = self._as_batch(points)
        n = arr.shape[-2]
        if n <= cfg.sgc.k:
            raise ParameterError(f"N={n} points is too few for k={cfg.sgc.k} neighbors")
        if normalize:
            arr = normalize_batch(arr)
        feats = Tensor(arr)
        xyz = feats[..., :3] if cfg.use_normals else feats
        if hasattr(self, "transform"):
            _, xyz = input_transform(xyz, cfg.sgc.k, self.transform, trace)
            feats = T.concat([xyz, feats[..., 3:]], axis=-1) if cfg.use_normals else xyz

        result = ForwardResult(logits=None)
        set_feats, per_point = [], None
        branch_inputs = {"P_R": (feats, None)}
        if cfg.uses_selection:
            n1 = cfg.n1_for(n)
            alpha, high, low = self.select(feats, xyz, n1, rng, trace)
            result.alpha = alpha
            result.selection = DistinctionResult(
                None if alpha is None else alpha.data, high, low)
            for name, idx in (("P_H", high), ("P_L", low)):
                w = None
                if alpha is not None:
                    w = T.reshape(T.gather_rows(T.reshape(alpha, alpha.shape + (1,)), idx), idx.shape)
                branch_inputs[name] = (T.gather_rows(feats, idx), w)
        for name in cfg.sets:
            inp, w = branch_inputs[name]
            keep = cfg.task == "segment" and name == "P_R"
            f, pp = self.branch(name)(inp, w, trace, key=name + ".", keep_per_point=keep)
            result.set_features[name] = f
            set_feats.append(f)
            if name == "P_R":
                per_point = pp
        f_g, psi = combine(set_feats, cfg.fusion, getattr(self, "fusion", None))
        result.global_feature = f_g
        result.psi = psi
        if cfg.task == "classify":
            logits = self.head(f_g, cfg.dropout, training, rng)
        else:
            g = T.broadcast_to(T.reshape(f_g, (f_g.shape[0], 1, f_g.shape[-1])),
                               per_point.shape[:-1] + (f_g.shape[-1],))
            logits = self.head(T.concat([per_point, g], axis=-1), cfg.dropout, training, rng)
        if single:
            logits = T.reshape(logits, logits.shape[1:])
        result.logits = logits
        return result

    __call__ = forward


def classify_forward(cloud, model: DNet, training: bool = False, rng=None) -> Tensor:
    """Class logits (length C) for one cloud."""
    if model.config.task != "classify":
        raise ConfigError("classify_forward needs a classification model")
    return model.forward(cloud, training, rng).logits


def segment_forward(cloud, model: DNet, training: bool = False, rng=None) -> Tensor:
    """Per-point part logits (N x parts) for one cloud."""
    if model.config.task != "segment":
        raise ConfigError("segment_forward needs a segmentation model")
    return model.forward(cloud, training, rng).logits


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean ``-log softmax(logits)[target]`` over all leading positions."""
    target = np.asarray(target, dtype=np.int64)
    logp = T.log_softmax(logits, axis=-1)
    c = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ParameterError(f"targets {target.shape} do not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ParameterError(f"target class outside [0, {c})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, target[..., None], 1, axis=-1)
    picked = T.sum_(T.mul(logp, onehot), axis=-1)
    return T.mul(T.mean(picked), -1.0)


def train_step(model: DNet, batch, labels, state: AdamState, lr: float, rng=None) -> float:
    """Forward, mean cross-entropy, backward and one ADAM update."""
    batch = np.asarray(batch)
    if batch.ndim != 3 or len(batch) == 0:
        raise ParameterError(f"batch must be a non-empty B x N x D array, got shape {batch.shape}")
    out = model.forward(batch, training=True, rng=rng)
    loss = cross_entropy(out.logits, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    params = model.parameters()
    for p in params:
        p.grad = None
    loss.backward()
    adam_step(params, state, lr)
    return value


def predict(model: DNet, points, batch_size: int = 32) -> np.ndarray:
    """Argmax predictions: ``B`` class ids or ``B x N`` part ids."""
    points = np.asarray(points)
    preds = []
    with T.no_grad():
        for s in range(0, len(points), batch_size):
            logits = model.forward(points[s:s + batch_size]).logits.data
            preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
