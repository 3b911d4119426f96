from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericError, Tensor, backward


def _scalar(value: Tensor) -> float:
    v = value.item()
    if not np.isfinite(v):
        raise NumericError(f"finite_difference_check: f returned non-finite value {v}")
    return v


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor.  Both the
    analytic gradient and the central differences are evaluated in
    ``x.dtype``; use float64 inputs for tight comparisons.
    """
    base = x.data.copy()
    probe = Tensor(base, requires_grad=True, dtype=base.dtype)
    out = f(probe)
    _scalar(out)
    if out.requires_grad:
        backward(out)
    analytic = np.zeros(base.size, dtype=np.float64)
    if probe.grad is not None:
        analytic = probe.grad.astype(np.float64).reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = _scalar(f(Tensor(plus.reshape(base.shape), dtype=base.dtype)))
        fm = _scalar(f(Tensor(minus.reshape(base.shape), dtype=base.dtype)))
        # the perturbation actually applied after rounding to x.dtype
        h = float(plus[i]) - float(minus[i])
        numeric = (fp - fm) / h
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def check_param_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> float:
    """Same metric as :func:`finite_difference_check`, for a parameter captured by ``loss_fn``.

    ``param.data`` is perturbed in place and restored afterwards.
    """
    saved = param.data.copy()
    param.grad = None
    out = loss_fn()
    backward(out)
    analytic = np.zeros(saved.size) if param.grad is None else param.grad.astype(np.float64).reshape(-1)
    param.grad = None
    flat = param.data.reshape(-1)
    worst = 0.0
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = flat[i]
            fp = _scalar(loss_fn())
            flat[i] = orig - step
            lo = flat[i]
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric = (fp - fm) / (float(hi) - float(lo))
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    finally:
        param.data[...] = saved
    return worst
