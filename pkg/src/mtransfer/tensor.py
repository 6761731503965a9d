"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Tensors produced by an op remember
their parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` walks that history from a scalar loss and sums
gradients into the leaves that require them.

Gradient contributions arriving at a node are summed in a canonical order
(sorted by the id of the consuming node), so the result does not depend on
the order in which the graph is traversed.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it.

    ``requires_grad`` marks trainable leaves; op outputs inherit it from
    their inputs. A tensor with ``requires_grad=False`` is a constant and
    never receives a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_ids)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        """Wrap an op result; the graph edge is only recorded when needed."""
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient with the lazy "never touched" state materialized as zeros."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the real definitions live in ops.
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("elementwise tensor product is not supported; use scalar_mul")
        return ops.scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scalar_mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -other)


def _graph(root: Tensor) -> tuple[dict[int, Tensor], dict[int, int]]:
    """Collect nodes needing gradient and count consumer edges per node."""
    nodes = {root._id: root}
    pending = {root._id: 0}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            pending[parent._id] = pending.get(parent._id, 0) + 1
            if parent._id not in nodes:
                nodes[parent._id] = parent
                stack.append(parent)
    return nodes, pending


def backward(loss: Tensor, reverse_ties: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``reverse_ties`` selects a different (equally valid) topological order;
    results are identical either way.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes, pending = _graph(loss)
    inbox: dict[int, list[tuple[int, int, np.ndarray]]] = {nid: [] for nid in nodes}
    inbox[loss._id].append((-1, 0, np.ones_like(loss.data)))

    sign = 1 if reverse_ties else -1
    ready = [(sign * loss._id, loss._id)]
    while ready:
        _, nid = heapq.heappop(ready)
        node = nodes.pop(nid)
        parts = sorted(inbox.pop(nid), key=lambda t: (t[0], t[1]))
        grad = parts[0][2]
        for _, _, g in parts[1:]:
            grad = grad + g

        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue

        parent_grads = node._backward(grad)
        for slot, (parent, pg) in enumerate(zip(node._parents, parent_grads)):
            if not parent.requires_grad:
                continue
            if pg is not None:
                if pg.shape != parent.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match tensor shape {parent.shape}")
                inbox[parent._id].append((nid, slot, pg))
            pending[parent._id] -= 1
            if pending[parent._id] == 0:
                if not inbox[parent._id]:
                    # Every consumer returned None: the node is reachable but gets no signal.
                    inbox[parent._id].append((nid, slot, np.zeros_like(parent.data)))
                heapq.heappush(ready, (sign * parent._id, parent._id))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
