"""Tensor type and the reverse-mode tape."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GradError(RuntimeError):
    """backward() called on something that cannot be differentiated."""


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (this thread only).

    Training always runs in float32; float64 exists so finite-difference
    oracles are not swamped by rounding noise.
    """
    prev = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Node:
    """One executed differentiable op on the tape."""

    __slots__ = ("seq", "kind", "inputs", "out_id", "backward_fn")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_SEQ)
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        # id only: a strong reference would make every tensor a GC cycle
        self.out_id = None

    def __repr__(self):
        return f"Node({self.kind}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy; used by ops for freshly produced arrays
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def relu(self):
        from . import ops

        return ops.relu(self)

    def backward(self) -> None:
        backward(self)


class ComputationTape:
    """Ordered record of the ops that produced a tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def of(cls, output: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append(inp._node)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reverse(self) -> list[Node]:
        return self.nodes[::-1]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise GradError(f"backward() expects a Tensor, got {type(loss).__name__}")
    if loss.size != 1:
        raise GradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("backward() on a tensor that does not require grad (detached)")

    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in ComputationTape.of(loss).reverse():
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
