"""Dense tensors with an append-only reverse-mode computation graph."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Graph:
    """Append-only list of recorded operations.

    Node ids are list positions, so every node's inputs carry smaller ids than
    the node itself and a reverse sweep over ids is a valid topological order.
    Leaf tensors (parameters and inputs) get a node the first time an op uses
    them.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple[int, ...], Optional[BackwardFn]]] = []
        self._leaves: dict[int, Tensor] = {}
        self._leaf_ids: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: "Tensor") -> int:
        if t.graph is self:
            return t.node_id
        if t.graph is not None:
            raise ValueError("tensor belongs to a different graph")
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(("leaf", (), None))
            self._leaf_ids[key] = nid
            self._leaves[nid] = t
        return nid

    def record(self, op: str, inputs: Sequence["Tensor"], backward: BackwardFn) -> int:
        ids = tuple(self.node_of(t) for t in inputs)
        self.nodes.append((op, ids, backward))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> None:
        """Sweep from ``loss`` down to id 0, accumulating into leaf ``.grad``."""
        if loss.graph is not self:
            raise ValueError("loss was not produced by this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            op, inputs, fn = self.nodes[nid]
            if op == "leaf":
                leaf = self._leaves[nid]
                if leaf.requires_grad:
                    if leaf.grad is None:
                        leaf.grad = np.zeros_like(leaf.data)
                    leaf.grad += g
                continue
            for iid, ig in zip(inputs, fn(g)):
                if ig is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + ig
                else:
                    grads[iid] = ig


class Tensor:
    """An n-d float array, optionally attached to a :class:`Graph`.

    ``graph``/``node_id`` are set only on tensors produced by an op whose
    inputs needed gradients; leaves keep ``graph = None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = "") -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"shape entries must be >= 1, got {arr.shape}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.graph: Optional[Graph] = None
        self.node_id: int = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.graph is None:
            raise ValueError("tensor is not part of a computation graph")
        self.graph.backward(self)

    def sum(self) -> "Tensor":
        shape = self.data.shape

        def back(g):
            return (np.broadcast_to(g, shape).copy(),)

        return apply("sum", (self,), np.asarray(self.data.sum()), back)

    def __add__(self, other: "Tensor") -> "Tensor":
        _same_shape(self, other, "add")
        return apply("add", (self, other), self.data + other.data, lambda g: (g, g))

    def __mul__(self, other: "Tensor") -> "Tensor":
        _same_shape(self, other, "mul")
        a, b = self.data, other.data
        return apply("mul", (self, other), a * b, lambda g: (g * b, g * a))

    def reshape(self, *shape: int) -> "Tensor":
        old = self.data.shape
        return apply("reshape", (self,), self.data.reshape(*shape), lambda g: (g.reshape(old),))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.graph is not None


def apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap ``out`` in a Tensor and record ``op`` if any input needs gradients."""
    result = Tensor(out)
    if not any(_needs_grad(t) for t in inputs):
        return result
    graph = next((t.graph for t in inputs if t.graph is not None), None)
    if graph is None:
        graph = Graph()
    result.graph = graph
    result.node_id = graph.record(op, inputs, backward)
    return result


def backward(loss: Tensor) -> None:
    loss.backward()
