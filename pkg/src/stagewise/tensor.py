"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, records its
parents and a closure that routes the output gradient back to them, and
``backward()`` walks the graph once in reverse topological order.  Storage is
float32 by default; gradient checks run the whole graph in float64 by
constructing float64 leaves.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Contract violation in graph construction or backward traversal."""


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    """A dense n-dimensional array with an optional gradient.

    Invariants: ``data`` is contiguous row-major, ``grad`` (when present) has
    the same shape and dtype, and all dimensions are >= 1.  Scalars are stored
    as shape-(1,) arrays.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32,
                 name: Optional[str] = None):
        self.data = np.ascontiguousarray(_as_array(data, dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result; the backward closure is attached only when some
        parent participates in differentiation."""
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    # -- basic introspection ---------------------------------------------------

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

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        if self.size != 1:
            raise AutodiffError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)
        t.name = self.name
        return t

    # -- gradients -------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with requires_grad=True.

        The loss must be scalar (size 1).  Each node's closure runs exactly
        once, after all of its consumers have contributed to its gradient.
        """
        if self.size != 1:
            raise AutodiffError(
                f"backward() requires a scalar loss, got shape {self.shape}")
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep gradients alive
                if node is not self:
                    node.grad = None

    # -- operator sugar (thin wrappers over ops.py) -----------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        from . import ops
        return ops.add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(_lift(other, self.dtype), -1.0))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def relu(self):
        from . import ops
        return ops.relu(self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))

