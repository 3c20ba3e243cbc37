"""A small reverse-mode autodiff engine on top of numpy arrays.

Every differentiable op records its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the graph once in
reverse topological order and accumulates into leaf tensors.
"""

import contextlib
import contextvars
import logging
import numbers
import typing as t

import numpy as np

from mpae.exceptions import DimensionError, UsageError

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

BackwardFn = t.Callable[[np.ndarray], t.Sequence[np.ndarray | None]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "mpae_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    def __init__(
        self,
        data: t.Any,
        requires_grad: bool = False,
        dtype: t.Any = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "",
    ):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            return cls(data, True, _parents=parents, _backward=backward, op=op)
        return cls(data)

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    # --- elementwise arithmetic (same shape or python scalar) ---

    def _coerce(self, other: "Tensor | numbers.Real") -> "Tensor":
        if isinstance(other, numbers.Real):
            return Tensor(np.asarray(other, dtype=self.dtype))
        if not isinstance(other, Tensor):
            raise TypeError(f"Unsupported operand type {type(other).__name__}")
        if other.shape != self.shape and other.ndim != 0:
            raise DimensionError(f"Shape mismatch: {self.shape} vs {other.shape}")
        return other

    def __add__(self, other):
        other = self._coerce(other)

        def _backward(g):
            return g, (g if other.ndim else g.sum())

        return Tensor.from_op(self.data + other.data, (self, other), _backward, "add")

    def __radd__(self, other):
        return self + other

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data

        def _backward(g):
            gb = g * a
            return g * b, (gb if other.ndim else gb.sum())

        return Tensor.from_op(a * b, (self, other), _backward, "mul")

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other: numbers.Real):
        if not isinstance(other, numbers.Real):
            raise TypeError("Only division by a scalar is supported")
        return self * (1.0 / other)

    def sum(self) -> "Tensor":
        shape = self.shape

        def _backward(g):
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

        return Tensor.from_op(self.data.sum(), (self,), _backward, "sum")

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    def __init__(self, data: t.Any, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: t.Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    Parameters listed in ``params`` that the loss does not reach end up with a
    zero gradient instead of ``None``.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    else:
        log.debug("backward() on a loss that does not depend on any parameter")
    for p in params or ():
        if p.grad is None:
            p.zero_grad()


def zero_grad(params: t.Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "zero_grad",
    "no_grad",
    "is_grad_enabled",
    "DEFAULT_DTYPE",
]
