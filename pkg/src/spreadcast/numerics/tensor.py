"""Dense tensor with reverse-mode differentiation.

Every operation producing a ``Tensor`` from operands that require gradients
records its operands and a backward rule on the output. ``Tensor.backward``
linearises the recorded graph into a tape (operands strictly before their
consumers) and walks it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"zero-sized tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph construction -------------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, parents: Iterable[Tensor], backward, op: str,
                check_finite: bool = True) -> Tensor:
        """Wrap an op result, recording the backward rule when needed.

        ``backward(g, needs)`` maps the upstream gradient to one gradient per
        parent; ``needs`` flags the parents whose gradient will be used, and
        the rule may return ``None`` for the others.
        """
        if check_finite and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite output from {op}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        parents = tuple(parents)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def tape(self) -> list[Tensor]:
        """Nodes reachable from ``self`` in topological order (operands first)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None, inputs: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        With ``inputs`` only those leaves receive gradients and work on
        branches that cannot reach them is skipped.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = self.tape()
        position = {id(n): i for i, n in enumerate(order)}
        if inputs is None:
            wanted = None
        else:
            targets = {id(t) for t in inputs}
            wanted = set()
            for node in order:
                if id(node) in targets or any(id(p) in wanted for p in node._parents):
                    wanted.add(id(node))
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if wanted is None or id(node) in wanted:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            needs = tuple(p.requires_grad and (wanted is None or id(p) in wanted) for p in node._parents)
            if not any(needs):
                continue
            grads = node._backward(g, needs)
            for parent, need, pg in zip(node._parents, needs, grads):
                if pg is None or not need:
                    continue
                assert position[id(parent)] < position[id(node)], "graph is not a DAG"
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- elementwise arithmetic --------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor.from_op(
            a.data + b.data, (a, b),
            lambda g, needs=None: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor.from_op(-self.data, (self,), lambda g, needs=None: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor.from_op(
            a.data * b.data, (a, b),
            lambda g, needs=None: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor.from_op(
            a.data / b.data, (a, b),
            lambda g, needs=None: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            "div")

    # -- reductions and reshaping ------------------------------------------
    def sum(self) -> Tensor:
        shape = self.shape
        return Tensor.from_op(np.asarray(self.data.sum(), dtype=self.dtype), (self,),
                              lambda g, needs=None: (np.broadcast_to(g, shape).copy(),), "sum")

    def mean(self) -> Tensor:
        shape, n = self.shape, self.size
        return Tensor.from_op(np.asarray(self.data.mean(), dtype=self.dtype), (self,),
                              lambda g, needs=None: (np.full(shape, g / n, dtype=g.dtype),), "mean")

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,),
                              lambda g, needs=None: (g.reshape(orig),), "reshape")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


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
    return g.reshape(shape)
