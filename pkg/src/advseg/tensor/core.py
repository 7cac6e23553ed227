"""Tensor type and the reverse-mode graph machinery.

A :class:`Tensor` wraps a read-only numpy array. Operations that touch a
tensor with ``requires_grad`` record a :class:`Node` on the output; calling
:meth:`Tensor.backward` on a scalar walks those nodes in reverse
topological order and accumulates gradients into the leaves.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class TensorError(Exception):
    """Base class for tensor contract violations."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class GraphError(TensorError, RuntimeError):
    pass


class Node:
    """One recorded operation: its inputs and a closure mapping the output
    gradient to one gradient per input (``None`` for inputs that need none)."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def _as_float_array(data, dtype) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in DTYPES else np.float64
    arr = np.array(data, dtype=dtype, copy=True)
    if any(n <= 0 for n in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return arr


class Tensor:
    """Dense float array with optional gradient tracking.

    Data is copied on construction and frozen; only ``grad`` is mutable.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "tensor"):
        arr = _as_float_array(data, dtype)
        _check_finite(arr, op)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, inputs: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        # Op outputs skip the defensive copy; read-only buffers may be shared.
        arr = np.asarray(arr)
        _check_finite(arr, op)
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """New leaf sharing this tensor's (read-only) buffer."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, threshold=20)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (implemented in ops) ------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False):
        from . import ops
        return ops.reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        from . import ops
        return ops.reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf of the graph.

        The graph is consumed: a second call on the same root raises
        :class:`GraphError`. Leaf gradients accumulate across calls on
        different graphs until reset with :meth:`zero_grad`.
        """
        if self.data.size != 1 or self.ndim != 0:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("root does not require grad")
        order = _topological_order(self)
        if any(n.consumed for n in (t.node for t in order if t.node is not None)):
            raise GraphError("graph already consumed; rebuild it with a new forward pass")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if t.node is None:
                if t.requires_grad:
                    if g is None:
                        g = np.zeros_like(t.data)
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            node = t.node
            if g is not None:
                in_grads = node.backward_fn(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if ig.shape != inp.shape:
                        raise ShapeError(f"op '{node.op}' produced grad {ig.shape} for input {inp.shape}")
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
            node.consumed = True
            node.backward_fn = None


def _topological_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` through requires-grad edges, inputs first."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
