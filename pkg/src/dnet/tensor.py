"""Dense tensors with reverse-mode automatic differentiation.

Arrays are stored as numpy arrays; every differentiable operation records its
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the graph in reverse topological order.

Storage defaults to 32-bit floats. ``precision(np.float64)`` switches the
default for newly created tensors, which is how gradient checks re-evaluate a
graph in double precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError, ParameterError

_state = {"dtype": np.float32, "grad": True, "pattern": None}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation only)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class PatternTape:
    """Records the discrete decisions of piecewise-linear ops.

    ReLU masks and max-pool argmax indices are appended in call order while
    recording; after :meth:`replay` the same decisions are handed back in the
    same order instead of being recomputed. A replayed forward pass therefore
    evaluates the single linear piece the recorded pass lived on, which is
    what finite differences must probe to be compared with the analytic
    (sub)gradient at a kink.
    """

    def __init__(self):
        self.records: list = []
        self.recording = True
        self._pos = 0

    def replay(self):
        self.recording = False
        self._pos = 0

    def decide(self, compute: Callable):
        if self.recording:
            value = compute()
            self.records.append(value)
            return value
        if self._pos >= len(self.records):
            raise ParameterError("pattern tape exhausted: the replayed graph differs from the recorded one")
        value = self.records[self._pos]
        self._pos += 1
        return value


@contextlib.contextmanager
def frozen_pattern(tape: PatternTape):
    """Route ReLU / max decisions through ``tape`` (see :class:`PatternTape`)."""
    old = _state["pattern"]
    _state["pattern"] = tape
    try:
        yield tape
    finally:
        _state["pattern"] = old


def _decide(compute: Callable):
    tape = _state["pattern"]
    return compute() if tape is None else tape.decide(compute)


class Tensor:
    """A node in the computation graph.

    Leaf tensors created with ``requires_grad=True`` are parameters; their
    ``grad`` is populated (accumulated) by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _state["dtype"], copy=None)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves whose gradient contribution was exactly nothing still count
        # as reached: give them zeros so optimizers see a populated grad
        for node in order:
            if node._backward is None and node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)


def _tracks(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._backward is not None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if _tracks(p) and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = ""
    if _state["grad"] and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (per-row gates broadcast
    as an ``N x 1`` column)."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if _tracks(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _tracks(b) else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


elementwise_mul = mul


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    if _state["pattern"] is None:
        out = np.maximum(x.data, 0)
        return _make(out, (x,), lambda g: (g * (out > 0),))
    mask = _decide(lambda: x.data > 0)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


# -- reductions --------------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


def max_reduce(x: Tensor, axis: int):
    """Maximum along ``axis``; returns ``(values, argindices)``.

    Ties resolve to the first maximal position, and the backward pass routes
    the gradient to that position only.
    """
    if x.ndim == 0:
        raise DimensionError("max_reduce needs at least one axis")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"max_reduce over empty axis {axis} of shape {x.shape}")
    lead = int(np.prod(x.shape[:axis], dtype=np.int64))
    trail = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    arg = _decide(lambda: _kernels.argmax_middle(
        np.ascontiguousarray(x.data).reshape(lead, x.shape[axis], trail)))
    arg = arg.reshape(x.shape[:axis] + x.shape[axis + 1:])
    values = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _make(values, (x,), backward), arg


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")

    def backward(g):
        ga = gb = None
        if _tracks(a):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if _tracks(b):
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (leading axes are batch)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), W), (W.shape[1],))
    else:
        out = matmul(x, W)
    return out if b is None else add(out, b)


# -- shape manipulation ------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""

    def backward(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _make(x.data[key], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in xs]} disagree"
            )
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes {[t.shape for t in xs]} differ")
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in xs]
    return concat(expanded, axis=axis)


# -- indexing --------------------------------------------------------------
def _scatter_rows(g: np.ndarray, flat_rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``g`` (rows x D) into an ``n_rows x D`` array."""
    d = g.shape[-1]
    g2 = g.reshape(-1, d)
    keys = (flat_rows.reshape(-1, 1) * d + np.arange(d)).ravel()
    out = np.bincount(keys, weights=g2.ravel(), minlength=n_rows * d)
    return out.reshape(n_rows, d).astype(g.dtype, copy=False)


def _flat_rows(x: Tensor, idx: np.ndarray):
    """Map ``idx`` to row numbers of ``x`` flattened to ``(-1, D)``."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ParameterError(f"indices must be integers, got {idx.dtype}")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].ravel()[0]
        raise IndexError(f"index {int(bad)} out of range for {n} rows")
    batch = x.shape[:-2]
    if idx.shape[: len(batch)] != batch:
        raise DimensionError(f"index batch shape {idx.shape} does not lead with {batch}")
    if not batch:
        return idx
    offsets = (np.arange(int(np.prod(batch))) * n).reshape(batch + (1,) * (idx.ndim - len(batch)))
    return idx + offsets


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of ``x[..., N, D]``: ``out[..., m, :] = x[..., idx[..., m], :]``.

    For batched ``x`` (shape ``B x N x D``) the index array must lead with the
    batch shape. The backward pass scatter-adds, so duplicated indices
    accumulate gradient.
    """
    rows = _flat_rows(x, idx)
    d = x.shape[-1]
    flat = x.data.reshape(-1, d)
    out = flat[rows]
    n_total = flat.shape[0]

    def backward(g):
        return (_scatter_rows(g, rows, n_total).reshape(x.shape),)

    return _make(out, (x,), backward)


def gather_max(x: Tensor, idx) -> Tensor:
    """``max_reduce(gather_rows(x, idx), axis=-2)`` fused.

    ``idx`` has shape ``(..., M, K)``; the result is ``(..., M, D)``. Only
    the first maximizing row per channel receives gradient.
    """
    if _state["pattern"] is not None:
        return max_reduce(gather_rows(x, idx), axis=-2)[0]
    rows = _flat_rows(x, idx)
    d = x.shape[-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    k = rows.shape[-1]
    values, src = _kernels.gather_max_forward(flat, np.ascontiguousarray(rows.reshape(-1, k)))
    out_shape = rows.shape[:-1] + (d,)
    n_total = flat.shape[0]

    def backward(g):
        grad = _kernels.scatter_channels(np.ascontiguousarray(g.reshape(-1, d)), src, n_total)
        return (grad.reshape(x.shape),)

    return _make(values.reshape(out_shape), (x,), backward)


def pooled_linear_relu(x: Tensor, W: Tensor, b: Tensor, weights: Optional[Tensor] = None):
    """``max_reduce(weights[..., None] * relu(linear(x, W, b)), axis=-2)`` fused.

    ``x`` is ``B x N x D``. The backward pass only visits the pooled row of
    each channel instead of the dense ``B x N x C`` activation gradient.
    Returns ``(values, argindices)`` like :func:`max_reduce`.
    """
    if x.ndim != 3:
        raise DimensionError(f"pooled_linear_relu expects B x N x D input, got {x.shape}")
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"pooled_linear_relu: input {x.shape}, weight {W.shape}, bias {b.shape}")
    if weights is not None and weights.shape != x.shape[:2]:
        raise DimensionError(f"pooling weights {weights.shape} do not match {x.shape[:2]}")
    if _state["pattern"] is not None:
        act = relu(linear(x, W, b))
        if weights is not None:
            act = act * reshape(weights, weights.shape + (1,))
        return max_reduce(act, axis=1)
    pre = x.data @ W.data + b.data
    if weights is not None:
        wdata = np.ascontiguousarray(weights.data, dtype=pre.dtype)
    else:
        wdata = np.ones(x.shape[:2], dtype=pre.dtype)
    values, arg = _kernels.relu_pool(pre, wdata)
    parents = (x, W, b) if weights is None else (x, W, b, weights)

    def backward(g):
        dx, dw, db, dweights = _kernels.pooled_linear_backward(
            x.data, W.data, pre, wdata, arg, np.ascontiguousarray(g))
        return (dx, dw, db) if weights is None else (dx, dw, db, dweights)

    return _make(values, parents, backward), arg


# -- regularization --------------------------------------------------------
def dropout(x: Tensor, rate: float, training: bool, seed=None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))
