"""Dense f64 tensors with tape-based reverse-mode autodiff.

Every op that sees an input with ``requires_grad`` records a :class:`Node`
carrying a global insertion number.  :func:`backward` collects the nodes
reachable from the loss and replays them in reverse insertion order, so the
tape is rebuilt per step and freed together with the tensors that own it.

Only leaf tensors (parameters and explicit inputs) accumulate into ``.grad``;
intermediate gradients live in a per-call dictionary, which is what makes
repeated ``backward`` calls accumulate cleanly.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_insertion = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_insertion)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.seq}, {self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    # make ``ndarray op Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out.node = None
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record(out, (a, b), "div", bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record(-x.data, (x,), "neg", lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), "scale", lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), "log", lambda g: (g / xd,))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _record(xd * sig, (x,), "silu", lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def rmsnorm(x, weight, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps) * weight`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm weight shape {weight.shape} does not match last axis of {x.shape}")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            gw = (g * normed).reshape(-1, wd.shape[0]).sum(axis=0)
        if x.requires_grad:
            gn = g * wd
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        return gx, gw

    return _record(normed * wd, (x, weight), "rmsnorm", bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _record(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), "sum", bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return scale(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _record(out, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------------------
# linear algebra and normalisers


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                # fold batch axes into one GEMM instead of a batched product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), "matmul", bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _record(p, (x,), "softmax", bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), "log_softmax", bw)


# ---------------------------------------------------------------------------
# indexing


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` is an integer array."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {weight.shape}")
    vocab, width = weight.shape

    def bw(g):
        gw = np.zeros((vocab, width))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, width))
        return (gw,)

    return _record(weight.data[ids], (weight,), "embedding", bw)


def gather_last(x, ids) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis."""
    x = as_tensor(x)
    ids = np.asarray(ids)[..., None]
    if ids.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"gather index shape {ids.shape[:-1]} does not match {x.shape[:-1]}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, ids, g[..., None], axis=-1)
        return (gx,)

    return _record(np.take_along_axis(x.data, ids, axis=-1)[..., 0], (x,), "gather", bw)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs ``(i, i + d/2)`` of the last axis by position angles.

    ``cos``/``sin`` have shape ``(seq, d/2)`` and broadcast against ``x[..., seq, d]``.
    """
    x = as_tensor(x)
    half = x.shape[-1] // 2
    if 2 * half != x.shape[-1] or cos.shape[-1] != half:
        raise DimensionError(f"rotary needs an even last axis matching tables, got {x.shape} / {cos.shape}")

    def rot(d, s):
        lo, hi = d[..., :half], d[..., half:]
        return np.concatenate([lo * cos - hi * s, hi * cos + lo * s], axis=-1)

    return _record(rot(x.data, sin), (x,), "rotary", lambda g: (rot(g, -sin),))


# ---------------------------------------------------------------------------
# backward


class ComputeGraph:
    """Nodes reachable from one output, in insertion order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> ComputeGraph:
        seen: dict[int, Node] = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(t.node for t in node.inputs if t.node is not None and id(t.node) not in seen)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    if loss.node is None:
        _accumulate_leaf(loss, seed)
        return
    graph = ComputeGraph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss.node): seed}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t.node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
