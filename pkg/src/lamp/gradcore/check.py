"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from lamp.errors import NumericError
from lamp.gradcore.tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-6,
                   indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``; only flat ``indices`` when given (others stay 0)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite objective while perturbing element {i}")
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
               floor: float = 1e-3, indices=None) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``f`` maps ``x`` to a scalar tensor. Per element the error is
    ``|a - n| / max(|a|, |n|, floor)``. With a 1e-6 step the central
    difference carries about eps * |f| / step of round-off (1e-9 when |f| is
    near 10), so gradients far below the floor cannot be resolved to 1e-5.
    Use 64-bit tensors. ``indices`` restricts the comparison to a subset of
    flat positions.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs 64-bit tensors")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ValueError("grad_check objective must be scalar")
    if not np.all(np.isfinite(y.data)):
        raise NumericError("non-finite objective at the check point")
    if y.requires_grad:
        y.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None
    numeric = numerical_grad(lambda: f(x), x, step, indices)
    x.requires_grad = was
    if indices is not None:
        analytic, numeric = analytic.reshape(-1)[indices], numeric.reshape(-1)[indices]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params, step: float = 1e-6,
                      floor: float = 1e-3, max_coords: int | None = None, rng=None) -> float:
    """Worst :func:`grad_check` error over every tensor in ``params``.

    With ``max_coords`` each tensor is probed at that many positions drawn
    from ``rng`` (all positions when the tensor is smaller).
    """
    worst = 0.0
    for p in params:
        idx = None
        if max_coords is not None and p.size > max_coords:
            idx = np.sort(rng.permutation(p.size)[:max_coords])
        worst = max(worst, grad_check(lambda _x: loss_fn(), p, step, floor, idx))
    return worst
