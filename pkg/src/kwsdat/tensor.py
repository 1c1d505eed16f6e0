"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass; applying it to tensors that require gradients links
the output to the function, which keeps references to its inputs and whatever
arrays its backward rule needs. ``backward`` walks that graph in reverse
creation order, which is also the order a :class:`Tape` records operations in,
so both routes accumulate gradients in exactly the same sequence.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True
_tape_stack: list["Tape"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which
    receives the upstream gradient plus a per-input flag saying whether that
    input's gradient is wanted, and returns one array (or None) per input.
    """

    parents: tuple["Tensor", ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, needs: Sequence[bool]) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs) -> "Tensor":
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = _grad_enabled and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track)
        if track:
            fn.parents = tensors
            result._fn = fn
            if _tape_stack:
                _tape_stack[-1].record(result)
        return result


class Tensor:
    """n-dimensional array that can take part in gradient computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._fn: Function | None = None
        self._seq = next(_seq)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad, needs):
        return tuple(_unbroadcast(grad, s) if n else None for s, n in zip(self.shapes, needs))


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad, needs):
        ga = _unbroadcast(grad, self.shapes[0]) if needs[0] else None
        gb = _unbroadcast(-grad, self.shapes[1]) if needs[1] else None
        return ga, gb


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad, needs):
        ga = _unbroadcast(grad * self.b, self.a.shape) if needs[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad, needs):
        return (-grad,)


class MatMul(Function):
    """2-D matrix product."""

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad, needs):
        ga = grad @ self.b.T if needs[0] else None
        gb = self.a.T @ grad if needs[1] else None
        return ga, gb


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad, needs):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad, needs):
        return (grad.reshape(self.shape),)


# -- graph traversal -------------------------------------------------------


def _collect(root: Tensor) -> list[Tensor]:
    """All graph nodes reachable from ``root``, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        if node._fn is not None:
            stack.extend(node._fn.parents)
    return sorted(seen.values(), key=lambda t: t._seq)


def _propagate(order: Iterable[Tensor], loss: Tensor, needed, sink) -> None:
    """Push gradients from ``loss`` through ``order`` (latest node first).

    ``needed(t)`` says whether a gradient for ``t`` should be computed and
    ``sink(t, g)`` receives the final gradient of every needed leaf or target.
    """
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        sink(node, g)
        fn = node._fn
        if fn is None:
            continue
        needs = [needed(p) for p in fn.parents]
        if not any(needs):
            continue
        for parent, pg, need in zip(fn.parents, fn.backward(g, needs), needs):
            if pg is None or not need:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _accumulate_leaf(node: Tensor, g: np.ndarray) -> None:
    if node._fn is not None or not node.requires_grad:
        return
    g = np.asarray(g, dtype=node.dtype)
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad = node.grad + g


def _check_scalar(loss: Tensor) -> None:
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into ``t.grad`` for every reachable leaf that requires it."""
    _check_scalar(loss)
    order = reversed(_collect(loss))
    _propagate(order, loss, lambda t: t.requires_grad, _accumulate_leaf)


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Return dloss/d(input) for each input without touching any ``.grad``.

    Only the branches of the graph that lead to ``inputs`` are differentiated,
    so parameter gradients are never formed when only an input gradient is
    asked for.
    """
    _check_scalar(loss)
    nodes = _collect(loss)
    targets = {id(t) for t in inputs}
    reach: dict[int, bool] = {}
    for node in nodes:
        hit = id(node) in targets
        if not hit and node._fn is not None:
            hit = any(reach.get(id(p), False) for p in node._fn.parents)
        reach[id(node)] = hit
    found: dict[int, np.ndarray] = {}

    def sink(node, g):
        if id(node) in targets:
            found[id(node)] = g

    _propagate(reversed(nodes), loss, lambda t: reach.get(id(t), False), sink)
    return [found.get(id(t), np.zeros_like(t.data)) for t in inputs]


class Tape:
    """Ordered record of the operations executed inside a ``with`` block.

    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        _check_scalar(loss)
        if loss._fn is not None and not any(n is loss for n in self.nodes):
            raise ContractError("loss was not recorded on this tape")
        leaves = {}
        for node in self.nodes:
            for p in node._fn.parents:
                if p._fn is None:
                    leaves[id(p)] = p
        # leaves come first in creation order, so they go last when reversed
        order = list(reversed(self.nodes)) + sorted(leaves.values(), key=lambda t: -t._seq)
        _propagate(order, loss, lambda t: t.requires_grad, _accumulate_leaf)

    def clear(self) -> None:
        """Drop every recorded intermediate and the arrays its backward saved."""
        for node in self.nodes:
            node._fn = None
        self.nodes.clear()
