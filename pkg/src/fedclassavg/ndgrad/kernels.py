"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``FEDCLASSAVG_DISABLE_NUMBA`` is unset (or ``0``).  Both paths
compute the same functions; they are not guaranteed to agree bitwise
with each other, only each with itself.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("FEDCLASSAVG_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by FEDCLASSAVG_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def log_softmax_np(x, mask):
    # excluded entries carry no probability mass and a zero output
    shifted = np.where(mask, x, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.where(mask, np.exp(x - m), 0)
    lse = np.log(e.sum(axis=1, keepdims=True)) + m
    return np.where(mask, x - lse, 0).astype(x.dtype, copy=False)


def log_softmax_backward_np(out, grad, mask):
    p = np.where(mask, np.exp(out), 0)
    g = np.where(mask, grad, 0)
    return (g - p * g.sum(axis=1, keepdims=True)).astype(out.dtype, copy=False)


def l2_normalize_np(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1)
    return (x / safe).astype(x.dtype, copy=False), norms.astype(x.dtype, copy=False)


def l2_normalize_backward_np(y, norms, grad):
    # d(x/|x|) = (g - y (y.g)) / |x|, zero rows keep a zero gradient
    dot = (y * grad).sum(axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1)
    out = np.where(norms > 0, (grad - y * dot) / safe, 0)
    return out.astype(y.dtype, copy=False)


def weighted_sum_np(stacked, weights):
    acc = np.zeros(stacked.shape[1], dtype=np.float64)
    for k in range(stacked.shape[0]):
        acc = acc + weights[k] * stacked[k].astype(np.float64)
    return acc


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def log_softmax_nb(x, mask):
        n, c = x.shape
        out = np.zeros_like(x)
        for i in range(n):
            m = -np.inf
            for j in range(c):
                if mask[i, j] and x[i, j] > m:
                    m = x[i, j]
            if m == -np.inf:
                continue
            s = 0.0
            for j in range(c):
                if mask[i, j]:
                    s += np.exp(x[i, j] - m)
            lse = np.log(s) + m
            for j in range(c):
                if mask[i, j]:
                    out[i, j] = x[i, j] - lse
        return out

    @njit(cache=True, nogil=True)
    def log_softmax_backward_nb(out, grad, mask):
        n, c = out.shape
        res = np.zeros_like(out)
        for i in range(n):
            gsum = 0.0
            for j in range(c):
                if mask[i, j]:
                    gsum += grad[i, j]
            for j in range(c):
                if mask[i, j]:
                    res[i, j] = grad[i, j] - np.exp(out[i, j]) * gsum
        return res

    @njit(cache=True, nogil=True)
    def l2_normalize_nb(x):
        n, d = x.shape
        y = np.zeros_like(x)
        norms = np.zeros((n, 1), dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j] * x[i, j]
            nrm = np.sqrt(s)
            norms[i, 0] = nrm
            if nrm > 0:
                for j in range(d):
                    y[i, j] = x[i, j] / nrm
        return y, norms

    @njit(cache=True, nogil=True)
    def l2_normalize_backward_nb(y, norms, grad):
        n, d = y.shape
        out = np.zeros_like(y)
        for i in range(n):
            nrm = norms[i, 0]
            if nrm > 0:
                dot = 0.0
                for j in range(d):
                    dot += y[i, j] * grad[i, j]
                for j in range(d):
                    out[i, j] = (grad[i, j] - y[i, j] * dot) / nrm
        return out

    @njit(cache=True, nogil=True)
    def weighted_sum_nb(stacked, weights):
        k, p = stacked.shape
        acc = np.zeros(p, dtype=np.float64)
        for r in range(k):
            w = weights[r]
            for j in range(p):
                acc[j] = acc[j] + w * np.float64(stacked[r, j])
        return acc

    log_softmax = log_softmax_nb
    log_softmax_backward = log_softmax_backward_nb
    l2_normalize = l2_normalize_nb
    l2_normalize_backward = l2_normalize_backward_nb
    weighted_sum = weighted_sum_nb
else:
    log_softmax = log_softmax_np
    log_softmax_backward = log_softmax_backward_np
    l2_normalize = l2_normalize_np
    l2_normalize_backward = l2_normalize_backward_np
    weighted_sum = weighted_sum_np


def backend() -> str:
    return "numba" if NUMBA_AVAILABLE else "numpy"
