"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as row-major (C-contiguous) numpy arrays, 32-bit by
default.  64-bit tensors are supported so gradient checking can run in
a trustworthy precision; an op's output keeps the dtype of its inputs.

Every differentiable op records a `Node` on its output tensor whenever
grad recording is enabled and at least one input requires gradients.
`backward` materialises the tape (the graph in topological order) and
propagates in reverse.  Gradients are accumulated into per-pass local
buffers and only then added into each tensor's `.grad`, so running
backward twice on the same graph doubles every gradient, and a tensor
consumed by two ops receives the sum of both path gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """N-dimensional dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.ascontiguousarray(data, dtype=dtype)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: inputs and the backward rule for one output."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


def make_output(data: np.ndarray, op: str, inputs: Sequence[Tensor],
                backward_fn) -> Tensor:
    """Wrap an op result, recording a node when gradients are being traced."""
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True, dtype=data.dtype)
        out.node = Node(op, inputs, backward_fn)
    else:
        out = Tensor(data, requires_grad=False, dtype=data.dtype)
    return out


class Tape:
    """Recorded operations behind one result, in topological order."""

    def __init__(self, entries: list):
        self.entries = entries  # tensors; every node's inputs precede it

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        entries: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                entries.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if id(inp) not in seen:
                        stack.append((inp, False))
        return Tape(entries)


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every requires_grad tensor reachable from `loss`.

    `loss` must be a scalar (size 1).  Gradients accumulate: repeated
    backward calls without `zero_grad` add up.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad
