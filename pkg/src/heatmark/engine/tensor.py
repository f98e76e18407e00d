"""Tensor objects and the reverse-mode autodiff tape.

A ``Graph`` is a tape: primitives append nodes in execution order, which
is by construction a topological order, and ``backward`` walks the tape
once in reverse.  Recording only happens while a ``Graph`` context is
active and at least one input requires gradients; outside a graph every
primitive is a plain numpy computation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from heatmark.errors import ConfigError, ContractError, ShapeError

_GRAPH_STACK: list["Graph"] = []

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-d float array with optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # -- inspection -------------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar (delegates to the primitive layer) ----------------
    def __add__(self, other):
        from heatmark.engine import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from heatmark.engine import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from heatmark.engine import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from heatmark.engine import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from heatmark.engine import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from heatmark.engine import ops

        return ops.div(other, self)

    def __neg__(self):
        from heatmark.engine import ops

        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from heatmark.engine import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from heatmark.engine import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        from heatmark.engine import ops

        return ops.reshape(self, shape)

    def transpose(self, axes):
        from heatmark.engine import ops

        return ops.transpose(self, axes)


class Node:
    """One recorded primitive application."""

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(
        self,
        kind: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
    ):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Execution tape; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def append(self, node: Node) -> None:
        self.nodes.append(node)


def active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def record(
    kind: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a primitive's forward result, taping it when appropriate."""
    graph = active_graph()
    needs_grad = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad and graph is not None)
    if out.requires_grad:
        graph.append(Node(kind, [t for t in inputs if isinstance(t, Tensor)], out, backward_fn))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out; each tape node is
    visited exactly once, in reverse recording order.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        dout = node.output.grad
        if dout is None:
            continue
        grads = node.backward_fn(dout)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                if g.shape != t.data.shape:
                    raise ShapeError(
                        f"{node.kind}: backward produced gradient of shape "
                        f"{g.shape} for input of shape {t.data.shape}"
                    )
                t.accumulate_grad(g)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    """Coerce scalars / arrays to a constant Tensor, matching dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def apply_primitive(kind: str, inputs: Sequence, params: Optional[dict] = None) -> Tensor:
    """Dispatch a primitive by name (the functional face of the op set)."""
    from heatmark.engine import ops

    fn = ops.PRIMITIVES.get(kind)
    if fn is None:
        raise ConfigError(f"unknown primitive kind {kind!r}; known: {sorted(ops.PRIMITIVES)}")
    return fn(*inputs, **(params or {}))
