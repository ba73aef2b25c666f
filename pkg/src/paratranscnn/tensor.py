"""Tensor type and the reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy array. Operations in
:mod:`paratranscnn.ops` record a node on the current thread's :class:`Tape`
whenever at least one input requires a gradient; :func:`backward` walks the
tape in reverse and sums gradients at fan-out points.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """N-d array with an optional gradient slot and a tape handle."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_tape: bool = False) -> None:
        backward(self, retain_tape=retain_tape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.
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
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor. ``name`` is filled in by the owning module tree."""

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    op: str
    inputs: Sequence[Tensor]
    out_id: int
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations for one thread."""

    nodes: list = field(default_factory=list)

    def record(self, op: str, inputs, out: Tensor, backward_fn) -> None:
        out.node_id = next(_ids)
        out.requires_grad = True
        self.nodes.append(Node(op, tuple(inputs), out.node_id, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    get_tape().reset()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients are added to any existing ``.grad`` so callers zero them
    between steps. The tape is cleared afterwards unless ``retain_tape``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = get_tape()
    if loss.node_id is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    pos = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out_id == loss.node_id:
            pos = i
            break
    if pos is None:
        raise ValueError("loss is not on the current tape")

    pending = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: pos + 1]):
        g = pending.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.node_id is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi
    if not retain_tape:
        tape.reset()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
