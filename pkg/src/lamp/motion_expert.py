"""Flow-matching Motion Expert over 2x2-patched scene-flow tokens.

A stack of self-attention blocks over the T x (K_h/2) x (K_w/2) motion
tokens, each block modulated by AdaLN shift/scale/gate vectors computed
from the mean-pooled context features concatenated with a sinusoidal
embedding of the flow time. With ``context_attention`` the self-attention
keys and values are prefixed with the (projected) context tokens, so motion
tokens can look up where things are in the scene. With ``aligned_context``
each motion token also receives a projection of the image-patch feature
covering the same 2x2 keypoint cell (the grid and the patch layout line up
one to one at desk scale). The output projection is
zero-initialized, so a fresh expert predicts zero velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lamp import flowmatch
from lamp.errors import ConfigError, NumericError, ShapeError
from lamp.gradcore import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Rng,
    Tensor,
    concat,
    expand,
    gate,
    modulate,
    no_grad,
    silu,
    sinusoidal_embedding,
)
from lamp.motionrep import GridSpec, MotionNormalizer, denormalize, unpatchify


@dataclass(frozen=True)
class MotionExpertConfig:
    d_m: int = 64
    layers: int = 4
    heads: int = 4
    time_dim: int = 32
    d_z: int = 64
    grid: GridSpec = field(default_factory=GridSpec)
    mlp_ratio: int = 4
    context_attention: bool = True
    aligned_context: bool = True

    def __post_init__(self):
        if self.d_m % self.heads:
            raise ConfigError(f"d_m={self.d_m} is not divisible by {self.heads} heads")

    @property
    def token_dim(self) -> int:
        return 12

    @property
    def num_tokens(self) -> int:
        return self.grid.num_tokens


PAPER_MOTION = dict(d_m=1024, layers=12)


class AdaLNBlock(Module):
    def __init__(self, d: int, heads: int, d_cond: int, rng: Rng, mlp_ratio: int = 4):
        self.d = d
        self.ln1 = LayerNorm(d, affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(d, heads, rng.spawn(0))
        self.ln2 = LayerNorm(d, affine=False, eps=1e-6)
        self.mlp = MLP(d, mlp_ratio * d, d, rng.spawn(1))
        self.ada = Linear(d_cond, 6 * d, rng.spawn(2))
        self.ada.weight.data *= 0.1

    def forward(self, x: Tensor, c: Tensor, prefix: Tensor | None = None) -> Tensor:
        b, d = x.shape[0], self.d
        mods = self.ada(c).reshape(b, 6, d)
        shift1, scale1, gate1, shift2, scale2, gate2 = (mods[:, i] for i in range(6))
        h = modulate(self.ln1(x), shift1, scale1)
        kv = h if prefix is None else concat([prefix, h], axis=1)
        x = x + gate(self.attn(h, kv), gate1 + 1.0)
        return x + gate(self.mlp(modulate(self.ln2(x), shift2, scale2)), gate2 + 1.0)


class MotionExpert(Module):
    def __init__(self, cfg: MotionExpertConfig, rng: Rng):
        self.cfg = cfg
        d, g = cfg.d_m, cfg.grid
        self.in_proj = Linear(cfg.token_dim, d, rng.spawn(0))
        self.pos_time = Parameter(rng.spawn(1).normal((g.T, d)) * 0.02)
        self.pos_space = Parameter(rng.spawn(2).normal((g.tokens_per_step, d)) * 0.02)
        self.cond = MLP(cfg.d_z + cfg.time_dim, d, d, rng.spawn(3))
        if cfg.context_attention:
            self.ctx_proj = Linear(cfg.d_z, d, rng.spawn(6))
            self.ctx_ln = LayerNorm(d)
        if cfg.aligned_context:
            self.align_proj = Linear(cfg.d_z, d, rng.spawn(7))
        self.blocks = [AdaLNBlock(d, cfg.heads, d, rng.spawn(10 + i), cfg.mlp_ratio)
                       for i in range(cfg.layers)]
        self.ln_f = LayerNorm(d, affine=False, eps=1e-6)
        self.ada_f = Linear(d, 2 * d, rng.spawn(4))
        self.ada_f.weight.data *= 0.1
        self.out_proj = Linear(d, cfg.token_dim, rng.spawn(5), zero=True)
        self.velocity_calls = 0

    def conditioning(self, tau, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[-1] != self.cfg.d_z:
            raise ShapeError(f"condition width mismatch: expected [B, L, {self.cfg.d_z}], got {z.shape}")
        b = z.shape[0]
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
        temb = Tensor(sinusoidal_embedding(tau, self.cfg.time_dim), dtype=z.dtype)
        return silu(self.cond(concat([z.mean(axis=1), temb], axis=1)))

    def forward(self, tokens: Tensor, tau, z: Tensor) -> tuple[Tensor, Tensor]:
        """tokens [B, L, 12] -> (velocity [B, L, 12], final-block hidden [B, L, d_m])."""
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[1:] != (cfg.num_tokens, cfg.token_dim):
            raise ShapeError(f"motion tokens {tokens.shape} vs [B, {cfg.num_tokens}, {cfg.token_dim}]")
        if z.shape[0] != tokens.shape[0]:
            raise ShapeError("condition batch does not match motion batch")
        self.velocity_calls += 1
        g, d = cfg.grid, cfg.d_m
        pos = (expand(self.pos_time.reshape(g.T, 1, d), (g.T, g.tokens_per_step, d))
               + expand(self.pos_space.reshape(1, g.tokens_per_step, d), (g.T, g.tokens_per_step, d)))
        x = self.in_proj(tokens) + pos.reshape(cfg.num_tokens, d)
        if cfg.aligned_context:
            x = x + self.aligned(z)
        c = self.conditioning(tau, z)
        prefix = self.ctx_ln(self.ctx_proj(z)) if cfg.context_attention else None
        for blk in self.blocks:
            x = blk(x, c, prefix)
        hidden = x
        b = x.shape[0]
        mods = self.ada_f(c).reshape(b, 2, d)
        out = self.out_proj(modulate(self.ln_f(x), mods[:, 0], mods[:, 1]))
        return out, hidden

    def aligned(self, z: Tensor) -> Tensor:
        """Patch features z[:, 1:] projected and repeated over the T time steps -> [B, L, d_m]."""
        g, d, b = self.cfg.grid, self.cfg.d_m, z.shape[0]
        s = g.tokens_per_step
        if z.shape[1] != 1 + s:
            raise ShapeError(f"aligned context needs 1 + {s} context tokens, got {z.shape[1]}")
        a = self.align_proj(z[:, 1:]).reshape(b, 1, s, d)
        return expand(a, (b, g.T, s, d)).reshape(b, g.T * s, d)

    def velocity(self, noisy: Tensor, tau, z: Tensor) -> Tensor:
        return self(noisy, tau, z)[0]

    def field(self, x: Tensor, tau, z: Tensor) -> Tensor:
        return self.velocity(x, tau, z)


def velocity(expert: MotionExpert, noisy_motion: Tensor, t, cond: Tensor) -> Tensor:
    return expert.velocity(noisy_motion, t, cond)


def sample_noise(expert: MotionExpert, batch: int, rng: Rng, dtype=None) -> Tensor:
    cfg = expert.cfg
    return Tensor(rng.normal((batch, cfg.num_tokens, cfg.token_dim)), dtype=dtype)


def generate_flow(expert: MotionExpert, cond: Tensor, schedule: flowmatch.SolverSchedule, rng: Rng,
                  norm: MotionNormalizer | None = None) -> np.ndarray:
    """Full Euler rollout from noise; returns denormalized fields [B, K_h, K_w, T, 3]."""
    g = expert.cfg.grid
    x0 = sample_noise(expert, cond.shape[0], rng, dtype=cond.dtype)
    with no_grad():
        x1 = flowmatch.euler_integrate(expert.field, x0, schedule, cond)
    if not np.all(np.isfinite(x1.data)):
        raise NumericError("non-finite generated motion")
    tokens = x1.data.reshape(cond.shape[0], g.T, g.K_h // 2, g.K_w // 2, 12)
    fields = unpatchify(tokens.astype(np.float64))
    return denormalize(fields, norm) if norm is not None else fields


def one_step_hidden(expert: MotionExpert, cond: Tensor, schedule: flowmatch.SolverSchedule,
                    rng: Rng) -> Tensor:
    """Hidden tokens [B, L_m, d_m] of the final block during the first Euler step from tau = 0.

    Runs exactly one velocity evaluation, without recording gradients.
    """
    x0 = sample_noise(expert, cond.shape[0], rng, dtype=cond.dtype)
    captured = {}

    def field(x, tau, z):
        v, h = expert(x, tau, z)
        captured["hidden"] = h
        return v

    with no_grad():
        flowmatch.partial_denoise(field, x0, schedule, 1, cond)
    return Tensor(captured["hidden"].data, dtype=cond.dtype)
