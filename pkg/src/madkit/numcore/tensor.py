"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps one dense array and remembers how it was produced.  Forward
evaluation is eager; calling ``backward`` on a scalar result walks the
recorded graph once in reverse topological order and accumulates gradients
into every reachable node that requires them.

The graph is rebuilt on every forward pass, so ordinary Python control flow
(loops, branches) works without tracing machinery.  Nodes whose inputs all
have ``requires_grad=False`` record no backward closures at all, which makes
teacher-style frozen forward passes cheap.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import UsageError, ValidationError

TensorLike = "Tensor | np.ndarray | float | int"


class Tensor:
    """One node of the computation graph: a float64 array plus provenance."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_vjps")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 vjps: Sequence[tuple["Tensor", Callable[[np.ndarray], np.ndarray]]] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        # (parent, vector-Jacobian closure) pairs; empty for leaves and for
        # results that do not need gradients.
        self._vjps = tuple(vjps)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph housekeeping ---------------------------------------------------

    def detach(self) -> "Tensor":
        """A leaf view of the same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar (implemented in ops.py, bound at import time) ---------
    # Arithmetic dunders are attached by numcore.ops to avoid a circular
    # import; see _bind_operators() there.


def as_tensor(x: TensorLike) -> Tensor:
    """Wrap a value as a constant Tensor (no gradient)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name: str = "param") -> Tensor:
    """A leaf Tensor that accumulates gradients."""
    t = Tensor(data, requires_grad=True, op=name)
    return t


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; returns nodes with parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    ``root`` must hold a single element.  Leaves listed in ``leaves`` that the
    graph never touched receive an explicit zero gradient, so optimizers can
    treat every registered parameter uniformly.
    """
    if root.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
    if not np.all(np.isfinite(root.data)):
        raise ValidationError("backward called on a non-finite root")
    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    # Children appear after their parents in `order`; traverse in reverse so
    # every node's grad is complete before being pushed to its parents.
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._vjps:
            contrib = vjp(g)
            # Accumulation is out-of-place so closures may safely return
            # views of forward buffers or of g itself.
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
