"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation records its inputs and a closure that pushes the upstream
gradient back to them. ``backward`` walks the recorded nodes in exact reverse
creation order, so a graph is rebuilt on every training step.

Only the operations the CTR model needs are provided. Binary operations follow
numpy broadcasting; the gradient of a broadcast operand is summed back to its
own shape.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-12

_node_ids = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(ValueError):
    """A vector with (near) zero norm was passed where a direction is needed."""


class GraphStateError(RuntimeError):
    """The graph was used in a way the define-by-run contract forbids."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind not in "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_node_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{opname} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = opname
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.dtype:
        g = g.astype(t.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: _accumulate(a, g * pos), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: _accumulate(a, g * s * (1.0 - s)), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: _accumulate(a, g * (1.0 - t * t)), "tanh")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` (binary) or ``relu``, ``sigmoid``, ``tanh``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dimensions of ``a`` are treated as a batch."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            _accumulate(b, a2.T @ g2)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tuple(tensors), back, "concat")


def take(a: Tensor, ids) -> Tensor:
    """Gather rows ``a[ids]`` along axis 0; the backward pass scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        bad = ids[(ids < 0) | (ids >= a.shape[0])][0]
        raise IndexError(f"take: index {int(bad)} out of range for {a.shape[0]} rows")

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, *a.shape[1:]))
            _accumulate(a, full)

    return _make(a.data[ids], (a,), back, "take")


# ---------------------------------------------------------------------------
# normalisation, similarity, losses


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` (boolean, broadcastable to ``a``) marks the valid positions;
    invalid ones get exactly zero weight and a fully masked slice is all zero.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    s = np.divide(e, z, out=np.zeros_like(e), where=z > 0).astype(a.dtype)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _make(s, (a,), back, "softmax")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; vectors give a scalar, batches a vector."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if (na < COSINE_EPS).any() or (nb < COSINE_EPS).any():
        raise DegenerateVectorError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=-1)
    c = dot / (na * nb)

    def back(g):
        g = g[..., None]
        cc, na_, nb_ = c[..., None], na[..., None], nb[..., None]
        if a.requires_grad:
            _accumulate(a, g * (b.data / (na_ * nb_) - cc * a.data / (na_ * na_)))
        if b.requires_grad:
            _accumulate(b, g * (a.data / (na_ * nb_) - cc * b.data / (nb_ * nb_)))

    return _make(np.asarray(c), (a, b), back, "cosine")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy computed from pre-sigmoid logits."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def back(g):
        _accumulate(logits, g * (_stable_sigmoid(z) - y) / n)

    return _make(np.asarray(per.mean(), dtype=logits.dtype), (logits,), back, "bce")


# ---------------------------------------------------------------------------
# graph traversal


def graph_order(root: Tensor) -> list[Tensor]:
    """Tracked nodes reachable from ``root`` in execution (creation) order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise GraphStateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph; rebuild it")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any tensor that requires grad")
    nodes = graph_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None  # interior grads are not kept
        node._consumed = True
    loss._consumed = True


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
