"""Flow-matching Action Expert over H-step action chunks.

Token layout: one state token built from the robot state and the
sinusoidal embedding of the motion flow time t1, followed by H action
tokens. Every token receives the embedding of the action flow time. The
blocks self-attend over this sequence and cross-attend onto the guided
context features. The output head is zero-initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp import flowmatch
from lamp.errors import ConfigError, NumericError, ShapeError
from lamp.gradcore import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Rng,
    Tensor,
    concat,
    expand,
    no_grad,
    sinusoidal_embedding,
)
from lamp.percept import Block


@dataclass(frozen=True)
class ActionExpertConfig:
    d_a: int = 64
    layers: int = 2
    heads: int = 4
    horizon: int = 4
    action_dim: int = 4
    state_dim: int = 4
    time_dim: int = 32
    d_z: int = 64

    def __post_init__(self):
        if self.d_a % self.heads:
            raise ConfigError(f"d_a={self.d_a} is not divisible by {self.heads} heads")
        if self.horizon < 1:
            raise ConfigError("action horizon must be positive")


class ActionExpert(Module):
    def __init__(self, cfg: ActionExpertConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_a
        self.act_in = Linear(cfg.action_dim, d, rng.spawn(0))
        self.time_mlp = MLP(cfg.time_dim, d, d, rng.spawn(1))
        self.state_in = Linear(cfg.state_dim + cfg.time_dim, d, rng.spawn(2))
        self.pos = Parameter(rng.spawn(3).normal((cfg.horizon + 1, d)) * 0.02)
        self.blocks = [Block(d, cfg.heads, rng.spawn(10 + i), d_ctx=cfg.d_z) for i in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.action_dim, rng.spawn(4), zero=True)
        self.velocity_calls = 0

    def forward(self, noisy: Tensor, tau, z_guided: Tensor, state, t1) -> Tensor:
        cfg = self.cfg
        b = noisy.shape[0]
        if noisy.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise ShapeError(f"action chunk {noisy.shape} vs [B, {cfg.horizon}, {cfg.action_dim}]")
        if z_guided.ndim != 3 or z_guided.shape[0] != b or z_guided.shape[-1] != cfg.d_z:
            raise ShapeError(f"guided context {z_guided.shape} vs [{b}, L, {cfg.d_z}]")
        state = np.asarray(state.data if isinstance(state, Tensor) else state)
        if state.shape != (b, cfg.state_dim):
            raise ShapeError(f"robot state {state.shape} vs [{b}, {cfg.state_dim}]")
        self.velocity_calls += 1
        dt = noisy.dtype
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
        t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (b,))
        s_in = np.concatenate([state, sinusoidal_embedding(t1, cfg.time_dim)], axis=1)
        s_tok = self.state_in(Tensor(s_in, dtype=dt))
        s_tok = s_tok.reshape(b, 1, cfg.d_a)
        x = concat([s_tok, self.act_in(noisy)], axis=1) + self.pos
        temb = self.time_mlp(Tensor(sinusoidal_embedding(tau, cfg.time_dim), dtype=dt))
        x = x + expand(temb.reshape(b, 1, cfg.d_a), x.shape)
        for blk in self.blocks:
            x = blk(x, z_guided)
        return self.head(self.ln_f(x[:, 1:]))


def velocity(expert: ActionExpert, noisy_chunk: Tensor, t, z_guided: Tensor, state, t1) -> Tensor:
    return expert(noisy_chunk, t, z_guided, state, t1)


def action_loss(expert: ActionExpert, data_chunk, noise_chunk, t, z_guided: Tensor, state, t1) -> Tensor:
    def field(x, tau, cond):
        return expert(x, tau, cond, state, t1)

    return flowmatch.flow_matching_loss(field, data_chunk, noise_chunk, t, z_guided)


def sample_chunk(expert: ActionExpert, z_guided: Tensor, state, t1, schedule: flowmatch.SolverSchedule,
                 rng: Rng, norm=None) -> np.ndarray:
    """Euler-integrate fresh Gaussian noise to an action chunk [B, H, 4].

    With ``norm`` (an ActionNormalizer) the result is mapped back to action units.
    """
    cfg = expert.cfg
    b = z_guided.shape[0]
    a0 = Tensor(rng.normal((b, cfg.horizon, cfg.action_dim)), dtype=z_guided.dtype)

    def field(x, tau, cond):
        return expert(x, tau, cond, state, t1)

    with no_grad():
        a1 = flowmatch.euler_integrate(field, a0, schedule, z_guided)
    out = a1.data.astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite action chunk")
    return norm.denormalize(out) if norm is not None else out
