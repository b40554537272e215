"""Conditional flow matching: linear interpolant, velocity target, loss, flow-time
sampling and the explicit Euler solver shared by both experts.

A velocity field is any callable ``field(x, tau, condition) -> Tensor`` where
``tau`` is a float or a per-sample array of flow times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lamp.errors import ConfigError, NumericError, ShapeError
from lamp.gradcore import Rng, Tensor, as_tensor, expand, mse

VelocityField = Callable[[Tensor, object, object], Tensor]

_TAU_LO = 2.0 ** -53
_TAU_HI = 1.0 - 2.0 ** -53


@dataclass(frozen=True)
class SolverSchedule:
    steps: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("solver needs at least one step")

    @property
    def grid(self) -> np.ndarray:
        """Flow times tau_n = (n - 1) / N for n = 1..N+1."""
        return np.arange(self.steps + 1, dtype=np.float64) / self.steps

    @property
    def t1(self) -> float:
        return 1.0 / self.steps


@dataclass(frozen=True)
class FlowTimeSampler:
    alpha: float = 1.5
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("Beta sampler parameters must be positive")


def _per_sample(t, x: Tensor) -> Tensor:
    """Broadcast a scalar or per-sample [B] flow time against ``x`` [B, ...]."""
    t = np.asarray(t, dtype=x.dtype)
    if t.ndim == 0:
        return Tensor(t, dtype=x.dtype)
    if t.shape != (x.shape[0],):
        raise ShapeError(f"flow times of shape {t.shape} do not match batch {x.shape[0]}")
    return expand(Tensor(t.reshape((-1,) + (1,) * (x.ndim - 1)), dtype=x.dtype), x.shape)


def interpolate(noise, data, t) -> Tensor:
    """(1 - t) * noise + t * data."""
    noise, data = as_tensor(noise), as_tensor(data)
    if noise.shape != data.shape:
        raise ShapeError(f"interpolate: noise {noise.shape} vs data {data.shape}")
    if isinstance(t, Tensor):
        return (1.0 - t) * noise + t * data
    tt = _per_sample(t, data)
    return (1.0 - tt) * noise + tt * data


def velocity_target(noise, data) -> Tensor:
    noise, data = as_tensor(noise), as_tensor(data)
    if noise.shape != data.shape:
        raise ShapeError(f"velocity_target: noise {noise.shape} vs data {data.shape}")
    return data - noise


def flow_matching_loss(model: VelocityField, data, noise, t, condition=None,
                       weight: np.ndarray | None = None) -> Tensor:
    """MSE between ``model(x_t, t, condition)`` and ``data - noise``.

    ``weight`` (broadcastable to ``data``) restricts the mean to valid entries.
    """
    data, noise = as_tensor(data), as_tensor(noise)
    x_t = interpolate(noise, data, t)
    pred = model(x_t, t, condition)
    if pred.shape != data.shape:
        raise ShapeError(f"model output {pred.shape} does not match data {data.shape}")
    return mse(pred, velocity_target(noise, data), weight)


def sample_flow_time(sampler: FlowTimeSampler, rng: Rng, n: int | None = None):
    """Draw Beta(alpha, beta) flow times strictly inside (0, 1).

    With beta == 1 the inverse CDF u ** (1 / alpha) is used on an open-interval
    uniform draw, so a fixed ``u`` maps to a closed-form flow time.
    """
    shape = () if n is None else (n,)
    if sampler.beta == 1.0:
        tau = inverse_cdf_beta1(rng.open_uniform(shape), sampler.alpha)
    else:
        tau = rng.beta(sampler.alpha, sampler.beta, shape)
    tau = np.clip(tau, _TAU_LO, _TAU_HI)
    return float(tau) if n is None else tau


def inverse_cdf_beta1(u, alpha: float):
    """Quantile of Beta(alpha, 1): F(x) = x**alpha."""
    return np.power(u, 1.0 / alpha)


def sample_uniform_time(rng: Rng, n: int | None = None):
    shape = () if n is None else (n,)
    tau = rng.open_uniform(shape)
    return float(tau) if n is None else tau


def _euler(field: VelocityField, x0, schedule: SolverSchedule, steps: int, condition) -> Tensor:
    x = as_tensor(x0)
    grid = schedule.grid
    for n in range(steps):
        tau, tau_next = grid[n], grid[n + 1]
        v = field(x, tau, condition)
        if v.shape != x.shape:
            raise ShapeError(f"field output {v.shape} vs state {x.shape} at step {n}")
        if not np.all(np.isfinite(v.data)):
            raise NumericError(f"non-finite velocity at solver step {n}")
        x = x + v * (tau_next - tau)
    return x


def euler_integrate(field: VelocityField, x0, schedule: SolverSchedule, condition=None) -> Tensor:
    """Integrate dx/dtau = field(x, tau, condition) from tau=0 to tau=1 in N Euler steps."""
    return _euler(field, x0, schedule, schedule.steps, condition)


def partial_denoise(field: VelocityField, x0, schedule: SolverSchedule, steps_taken: int,
                    condition=None) -> Tensor:
    """The Euler recursion stopped after ``steps_taken`` steps (tau = steps_taken / N)."""
    if not 1 <= steps_taken <= schedule.steps:
        raise ConfigError(f"steps_taken must lie in [1, {schedule.steps}]")
    return _euler(field, x0, schedule, steps_taken, condition)


class CountingField:
    """Wraps a velocity field and counts evaluations."""

    def __init__(self, field: VelocityField):
        self.field = field
        self.calls = 0

    def __call__(self, x, tau, condition):
        self.calls += 1
        return self.field(x, tau, condition)
