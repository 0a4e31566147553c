"""Dense tensor value and the reverse-mode tape that differentiates through it."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateLengthError(ShapeError):
    """Raised when a time axis is too short for the requested op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractError(RuntimeError):
    """Raised when the tape is used outside its contract."""


class Tensor:
    """An n-dimensional array plus the bookkeeping needed for autodiff.

    Tensors are treated as immutable values: ops always allocate new ones.
    ``requires_grad`` marks leaves (parameters, inputs under test) whose
    gradient should be collected by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops in execution order.

    Use as a context manager; ops run while no tape is active are not
    recorded (inference mode)::

        with Tape() as tape:
            loss = model.loss(x, y)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        for p in parents:
            if p.requires_grad and p._node is None:
                self.parameters.setdefault(id(p), p)
        node = Node(out, parents, backward)
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Sweep the tape in reverse from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires
    grad; the returned mapping is ``{leaf: gradient}`` for the leaves
    reached from ``loss``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    leaves = dict(tape.parameters)
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, check: bool = True) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    if check and not np.isfinite(data).all():
        raise NonFiniteError("op produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))
