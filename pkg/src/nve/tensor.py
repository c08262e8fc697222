"""Reverse-mode autodiff tensor on top of numpy arrays.

A ``Tensor`` wraps an ndarray and, when produced by an operation, remembers
its parent tensors and a backward closure. ``backward()`` on a scalar walks
the graph once in reverse topological order.

Gradient semantics: every ``backward()`` call first zeroes the grads of all
reachable gradient-requiring nodes and then accumulates into them, so grads
are overwritten per call. Calling ``backward()`` twice on the same graph
without a new forward pass yields identical grads.
"""

import numpy as np

from .errors import GraphError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_array(data):
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` of every reachable gradient-requiring tensor."""
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar node, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise GraphError("backward() on a tensor with requires_grad=False")

        topo = _toposort(self)
        for node in topo:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; the layer ops live in nve.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def sum(self):
        from . import ops

        return ops.tensor_sum(self)


def from_op(data, parents, backward_fn):
    """Build an op output tensor wired into the graph.

    ``backward_fn(out_grad)`` must accumulate into each gradient-requiring
    parent via ``accumulate_grad``. The hookup is skipped entirely when no
    parent requires grad.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _toposort(root):
    # Iterative postorder; graphs can be deep enough to worry about recursion.
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo
