"""Versioned binary bundle of model config, named tensors and optimizer state.

Layout (all integers little-endian)::

    b"DNET" | u32 version | u32 len + UTF-8 JSON header | u32 tensor count
    then per tensor: u32 len + UTF-8 name | u8 rank | rank x u32 dims | float32 values

The JSON header holds ``{"config": ..., "metadata": ..., "optimizer_step": ...}``.
Optimizer moments are stored as extra tensors named ``adam.m.<param>`` and
``adam.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (CheckpointFormatError, CheckpointMismatchError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError)
from .model import DNet, ModelConfig
from .optim import AdamState

MAGIC = b"DNET"
VERSION = 1
_M, _V = "adam.m.", "adam.v."
# fields that only affect initialization, not the parameter layout or forward
_INIT_ONLY = ("seed",)


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    optimizer: Optional[AdamState] = None
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def build_model(self) -> DNet:
        """Fresh model from the stored config, loaded with the stored tensors."""
        model = DNet(self.config)
        own = OrderedDict(model.named_parameters())
        if list(own) != list(self.tensors):
            missing = sorted(set(own) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(own))
            raise CheckpointMismatchError(f"tensor names differ from config: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if p.shape != self.tensors[name].shape:
                raise CheckpointMismatchError(f"{name}: stored shape {self.tensors[name].shape} != {p.shape}")
        model.load_state_dict(self.tensors)
        return model


def config_diff(a: ModelConfig, b: ModelConfig) -> list:
    """``(key, a_value, b_value)`` for every differing dotted key
    (initialization-only fields ignored)."""
    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            if isinstance(v, dict):
                out.update(flat(v, f"{prefix}{k}."))
            else:
                out[prefix + k] = list(v) if isinstance(v, tuple) else v
        return out
    fa, fb = flat(a.to_dict()), flat(b.to_dict())
    return [(k, fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb))
            if k not in _INIT_ONLY and fa.get(k) != fb.get(k)]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError(f"{name}: rank {arr.ndim} does not fit in one byte")
    head = _pack_str(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def save_checkpoint(path, model: DNet, optimizer: Optional[AdamState] = None,
                    metadata: Optional[dict] = None) -> None:
    """Serialize ``model`` (and optionally ADAM moments). Writes atomically."""
    params = list(model.named_parameters())
    header = {
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "optimizer_step": None if optimizer is None else int(optimizer.step),
    }
    items = [(n, p.data) for n, p in params]
    if optimizer is not None:
        if len(optimizer.m) != len(params):
            raise ConfigError("optimizer state does not match the model parameters")
        items += [(_M + n, m) for (n, _), m in zip(params, optimizer.m)]
        items += [(_V + n, v) for (n, _), v in zip(params, optimizer.v)]
    chunks = [MAGIC, struct.pack("<I", VERSION),
              _pack_str(json.dumps(header, sort_keys=True, separators=(",", ":"))),
              struct.pack("<I", len(items))]
    chunks += [_pack_tensor(n, a) for n, a in items]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.buf)} while reading {what} ({n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        raw = self.take(self.u32(what + " length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"{what} is not valid UTF-8") from e


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse a checkpoint completely before returning anything.

    With ``expected``, the stored config must agree on every architectural
    field, otherwise :class:`CheckpointMismatchError` names the keys.
    """
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = len(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} (supported: {VERSION})")
    try:
        header = json.loads(r.string("config block"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: malformed config block: {e}") from e
    count = r.u32("tensor count")
    tensors = OrderedDict()
    for i in range(count):
        name = r.string(f"tensor {i} name")
        rank = r.take(1, f"{name} rank")[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"{name} values"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - r.pos} trailing bytes after the last tensor")

    params = OrderedDict((n, a) for n, a in tensors.items() if not n.startswith((_M, _V)))
    optimizer = None
    step = header.get("optimizer_step")
    if step is not None:
        try:
            m = [tensors[_M + n] for n in params]
            v = [tensors[_V + n] for n in params]
        except KeyError as e:
            raise CheckpointFormatError(f"{path}: optimizer moment {e} missing") from None
        optimizer = AdamState(int(step), m, v)
    ckpt = Checkpoint(config, params, optimizer, header.get("metadata", {}), version)
    if expected is not None:
        diff = config_diff(config, expected)
        if diff:
            detail = ", ".join(f"{k}={a!r} (requested {b!r})" for k, a, b in diff)
            raise CheckpointMismatchError(f"{path}: checkpoint config differs from requested config in: {detail}")
    return ckpt
