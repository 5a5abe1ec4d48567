"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a rule mapping the output gradient to parent gradients. ``backward`` orders
the recorded nodes by creation sequence (the tape) and replays the rules in
reverse, so each operation contributes exactly once.

    >>> w = Tensor([1.0, -2.0], requires_grad=True)
    >>> backward(sum(w * w))
    >>> w.grad
    array([ 2., -4.])
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegeneracyError, DimensionError, DomainError, NonFiniteError

NORM_EPS = 1e-12

_sequence = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward pass produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = rule if out.requires_grad else None
    out._seq = next(_sequence)
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), rule)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(t.data * c, (t,), lambda g: (g * c,))


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _result
        out_data = np.exp(t.data)
    return _result(out_data, (t,), lambda g: (g * out_data,))


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError("log of a non-positive value")
    x = t.data
    return _result(np.log(x), (t,), lambda g: (g / x,))


def relu(t: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = t.data > 0
    return _result(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def clip_min(t: Tensor, lo: float) -> Tensor:
    """max(t, lo); gradient passes only where t > lo."""
    mask = t.data > lo
    return _result(np.where(mask, t.data, lo), (t,), lambda g: (g * mask,))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, exp, log, relu, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "exp": exp, "log": log, "relu": relu, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    with np.errstate(over="ignore", invalid="ignore"):
        out = ad @ bd
    return _result(out, (a, b), rule)


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _result(t.data.T.copy(), (t,), lambda g: (g.T,))


def index(t: Tensor, key) -> Tensor:
    shape = t.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(t.data[key], dtype=np.float64), (t,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- reductions ----------------------------------------------------------------

def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def sum(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    _check_axis(t, axis)
    shape = t.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(t.data.sum(axis=axis), dtype=np.float64), (t,), rule)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    n = t.size if axis is None else t.shape[axis]
    return scale(sum(t, axis), 1.0 / n)


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    if op == "sum":
        return sum(t, axis)
    if op == "mean":
        return mean(t, axis)
    raise ContractError(f"unknown reduction {op!r}")


# -- composite ops with fused backward rules ---------------------------------------

def l2_normalize(t: Tensor) -> Tensor:
    """Divide each row by its Euclidean norm."""
    if t.data.ndim != 2:
        raise DimensionError("l2_normalize expects an n x d matrix")
    norms = np.sqrt((t.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DegeneracyError("cannot normalize a row with near-zero norm")
    y = t.data / norms

    def rule(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _result(y, (t,), rule)


def log_softmax(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise DimensionError("log_softmax expects an n x c matrix")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _result(out, (t,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax(t: Tensor) -> Tensor:
    return exp(log_softmax(t))


def pairwise_sqdist(t: Tensor) -> Tensor:
    """n x n matrix of squared Euclidean distances between rows."""
    if t.data.ndim != 2:
        raise DimensionError("pairwise_sqdist expects an n x d matrix")
    x = t.data
    diff = x[:, None, :] - x[None, :, :]
    out = (diff ** 2).sum(axis=2)

    def rule(g):
        s = g + g.T
        return (2.0 * (s.sum(axis=1, keepdims=True) * x - s @ x),)

    return _result(out, (t,), rule)


# -- tape replay -------------------------------------------------------------------

def _tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in recorded (creation) order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
