"""AdamW, global-norm clipping and the cosine-with-floor learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lamp.errors import TrainingError
from lamp.gradcore.nn import Parameter


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Parameters are addressed by name so moment buffers survive a checkpoint
    round trip. Frozen parameters are skipped entirely.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.95), weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params: dict[str, Parameter] = dict(named_params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        b1, b2 = st.betas
        for name, p in self.params.items():
            if p.frozen:
                continue
            if p.grad is None:
                raise TrainingError(f"parameter {name!r} has no gradient")
        st.step += 1
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            if p.frozen:
                continue
            g = p.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            data = p.data
            if st.weight_decay:
                data = data * (1.0 - st.lr * st.weight_decay)
            p.data = (data - st.lr * update).astype(p.dtype)


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None and not p.frozen]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None and not p.frozen:
                p.grad = p.grad * np.asarray(factor, dtype=p.grad.dtype)
    return total


def cosine_with_min_lr(step: int, total_steps: int, lr: float, min_lr: float,
                       warmup: int = 0) -> float:
    """Linear warm-up, then half-cosine decay from ``lr`` to ``min_lr`` at ``total_steps``."""
    if warmup and step < warmup:
        return lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + (lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
