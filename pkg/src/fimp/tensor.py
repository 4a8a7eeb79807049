"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to per-parent gradients.
``Tensor.backward`` collects the reachable sub-graph into a :class:`GradTape`
and replays it in reverse creation order, which is a reverse topological order
because a node is always created after its inputs.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

EPS_NORM = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)

_ids = itertools.count()
_grad_mode = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        GradTape.from_root(self).replay(self, np.asarray(grad, dtype=np.float64))

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return slice_(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Reachable part of a graph, ordered for a single backward sweep."""

    def __init__(self, nodes: list[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> GradTape:
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id, reverse=True))

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        if not root.requires_grad:
            return
        pending: dict[int, np.ndarray] = {root._id: seed}
        for node in self.nodes:
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a forward result; records ``backward`` only when some parent needs it."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a vector over the last axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match trailing axis of {x.shape}")
    return add(x, bias)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return make_op(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),))


# -- linear algebra and shape ops ----------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return make_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),))


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; the backward pass hands each input its own slice."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    widths = [t.shape[ax] for t in tensors]
    edges = np.cumsum([0, *widths])

    def backward(g):
        return tuple(np.take(g, np.arange(edges[i], edges[i + 1]), axis=ax) for i in range(len(tensors)))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- normalisation ---------------------------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if (norm < EPS_NORM).any():
        raise DegenerateInputError(f"l2_normalize: vector norm below {EPS_NORM:g}")
    y = x.data / norm
    return make_op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


# -- losses ------------------------------------------------------------------------
def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy over every entry."""
    targets = as_tensor(targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    x, t = logits.data, targets.data
    per_entry = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return g * (sigmoid_np(x) - t) / n, None

    return make_op(np.asarray(per_entry.mean()), (logits, targets), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Squared L2 error summed over features, averaged over rows."""
    target = as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    b = pred.shape[0]

    def backward(g):
        gp = g * 2.0 * diff / b
        return gp, -gp

    return make_op(np.asarray((diff**2).sum() / b), (pred, target), backward)
