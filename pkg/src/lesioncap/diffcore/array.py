"""DiffArray: an n-dimensional value that records how it was computed.

Every op in :mod:`lesioncap.diffcore.ops` returns a new ``DiffArray`` whose
``_parents`` and ``_backward`` closure let :func:`backward` push gradients
back to every ancestor with ``requires_grad=True``.  Gradients accumulate
(``+=``) so shared subexpressions are handled; call :meth:`DiffArray.zero_grad`
or :func:`zero_grad` between steps.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_default_dtype = np.float64


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    """Raised on invalid use of the gradient graph."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class DiffArray:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents",
                 "_backward", "_op", "_consumed", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> DiffArray defer to us

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["DiffArray"],
                 backward: Callable, op: str) -> "DiffArray":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out._op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ----------------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        """Clear gradients on this node and all its ancestors and re-arm backward."""
        for node in _toposort(self):
            node.grad = None
        self._consumed = False

    # -- operators (implemented in ops, imported lazily to avoid a cycle) ------
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
        if isinstance(other, DiffArray):
            raise TypeError("division by a DiffArray is not supported")
        from . import ops
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_mean(self, axis=axis, keepdims=keepdims)


def as_array(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=_default_dtype))


def custom_op(data, parents: Sequence[DiffArray], backward_fn: Callable, name: str = "custom") -> DiffArray:
    """Wrap a forward value and a hand-written backward into a graph node.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    return DiffArray._from_op(np.asarray(data), parents, backward_fn, name)


def _toposort(root: DiffArray) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffArray) -> None:
    """Reverse-mode sweep from a scalar ``root``.

    Each node in the graph is visited exactly once.  A second call on the same
    root without ``root.zero_grad()`` raises :class:`GraphError`.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward already ran on this graph; call zero_grad() first")
    if not root.requires_grad:
        root._consumed = True
        return
    root._consumed = True
    order = _toposort(root)
    seed = np.ones_like(root.data)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise GraphError(
                    f"{node._op}: backward produced grad {g.shape} for parent {parent.data.shape}")
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g


def zero_grad(arrays: Iterable[DiffArray]) -> None:
    for a in arrays:
        a.grad = None
