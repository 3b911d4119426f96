"""Differentiable forward ops.

Every op checks operand shapes, refuses to emit NaN/Inf, and records a
:class:`Node` when any input requires grad.  Broadcasting is limited to
scalar-times-tensor plus the explicit row-vector ``bias_add``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Node, NumericError, ShapeError, Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericError(f"{kind}: non-finite result from inputs of shape {shapes}")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        node = Node(kind, inputs, backward_fn)
        node.out_id = id(out)
        out._node = node
    return out


def _require_rank(kind: str, t: Tensor, rank: int) -> None:
    if t.data.ndim != rank:
        raise ShapeError(f"{kind}: expected rank-{rank} input, got shape {t.shape}")


def _require_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_rank("matmul", a, 2)
    _require_rank("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def mul_scalar(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return _emit("mul_scalar", a.data * s, (a,), lambda g: (g * s,))


def bias_add(x, b) -> Tensor:
    """``x[i, :] + b`` for a (rows, n) matrix and an (n,) vector."""
    x, b = _as_tensor(x), _as_tensor(b)
    _require_rank("bias_add", x, 2)
    _require_rank("bias_add", b, 1)
    if x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: width {x.shape} does not match bias {b.shape}")
    return _emit("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    return _emit("relu", out, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(A)
    return _emit("log", out, (a,), lambda g: (g / A,))


def sqrt(a) -> Tensor:
    """Elementwise square root; the gradient at exactly 0 is defined as 0."""
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype, copy=False),)

    return _emit("sqrt", out, (a,), grad_fn)


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=dtype), dtype=dtype)
    return _emit("sum", out, (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, dtype, n = a.shape, a.dtype, a.size
    out = np.asarray(a.data.sum(dtype=dtype) / dtype.type(n), dtype=dtype)
    return _emit("mean", out, (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def log_softmax(a, mask=None) -> Tensor:
    """Row-wise log-softmax.

    ``mask`` (bool, same shape) excludes entries from the normaliser; excluded
    outputs are 0 and receive no gradient.
    """
    a = _as_tensor(a)
    _require_rank("log_softmax", a, 2)
    if mask is None:
        mask = np.ones(a.shape, dtype=np.bool_)
    else:
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
        if mask.shape != a.shape:
            raise ShapeError(f"log_softmax: mask {mask.shape} does not match input {a.shape}")
    out = kernels.log_softmax(a.data, mask)
    return _emit(
        "log_softmax", out, (a,), lambda g: (kernels.log_softmax_backward(out, g, mask),)
    )


def l2_normalize_rows(a) -> Tensor:
    a = _as_tensor(a)
    _require_rank("l2_normalize_rows", a, 2)
    y, norms = kernels.l2_normalize(a.data)
    return _emit(
        "l2_normalize_rows", y, (a,), lambda g: (kernels.l2_normalize_backward(y, norms, g),)
    )


def concat_rows(tensors: Sequence) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows: no inputs")
    for t in tensors:
        _require_rank("concat_rows", t, 2)
    width = tensors[0].shape[1]
    if any(t.shape[1] != width for t in tensors):
        raise ShapeError(f"concat_rows: widths differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _emit("concat_rows", out, tensors, lambda g: tuple(np.split(g, splits, axis=0)))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    _require_rank("transpose", a, 2)
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def gather_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    _require_rank("gather_rows", a, 2)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", a.data[idx], (a,), grad_fn)


_TABLE = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "bias_add": bias_add,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sum": sum,
    "mean": mean,
    "log_softmax": log_softmax,
    "l2_normalize_rows": l2_normalize_rows,
    "transpose": transpose,
    "gather_rows": gather_rows,
}

OP_KINDS = tuple(sorted([*_TABLE, "concat_rows"]))


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an op by name. ``concat_rows`` takes the whole input list."""
    if kind == "concat_rows":
        return concat_rows(inputs)
    try:
        fn = _TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **kwargs)
