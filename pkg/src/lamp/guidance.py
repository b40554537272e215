"""Fusion of one-step motion hidden states into the context features.

``gated`` is the method: z + sigmoid(g) * CA(LN(z), LN(W z_m)) with one
learnable scalar gate. ``add`` and ``concat_mlp`` are the ablation
variants and ``none`` is the no-motion pass-through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp.errors import ConfigError, ShapeError
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
    sigmoid,
)

MODES = ("gated", "add", "concat_mlp", "none")
G0_CLOSED = -4.0  # sigmoid(-4) ~ 0.018, the "near-zero injection" reading


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "gated"
    heads: int = 4
    g0: float = 0.0
    d_z: int = 64
    d_m: int = 64
    z_tokens: int = 17
    m_tokens: int = 128
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown guidance mode {self.mode!r}; expected one of {MODES}")
        if self.d_z % self.heads:
            raise ConfigError(f"d_z={self.d_z} is not divisible by {self.heads} heads")

    @property
    def uses_motion(self) -> bool:
        return self.mode != "none"


class GuidanceModule(Module):
    def __init__(self, cfg: GuidanceConfig, rng: Rng):
        self.cfg = cfg
        if cfg.mode == "gated":
            self.proj = Linear(cfg.d_m, cfg.d_z, rng.spawn(0))
            self.ln_m = LayerNorm(cfg.d_z)
            self.ln_q = LayerNorm(cfg.d_z)
            self.attn = MultiHeadAttention(cfg.d_z, cfg.heads, rng.spawn(1))
            self.gate = Parameter(np.asarray(cfg.g0))
        elif cfg.mode == "add":
            self.proj = Linear(cfg.d_m, cfg.d_z, rng.spawn(0))
            # token resampling L_m -> L_z, starts as a plain mean over motion tokens
            self.resample = Parameter(np.full((cfg.m_tokens, cfg.z_tokens), 1.0 / cfg.m_tokens))
        elif cfg.mode == "concat_mlp":
            self.mlp = MLP(cfg.d_z + cfg.d_m, cfg.mlp_hidden, cfg.d_z, rng.spawn(0))

    def _check(self, z: Tensor, z_m: Tensor | None) -> None:
        cfg = self.cfg
        if z.ndim != 3 or z.shape[-1] != cfg.d_z:
            raise ShapeError(f"context features {z.shape} vs width {cfg.d_z}")
        if z_m is None:
            return
        if z_m.ndim != 3 or z_m.shape[-1] != cfg.d_m or z_m.shape[0] != z.shape[0]:
            raise ShapeError(f"motion hidden state {z_m.shape} vs [{z.shape[0]}, L_m, {cfg.d_m}]")

    def forward(self, z: Tensor, z_m: Tensor | None = None) -> Tensor:
        mode = self.cfg.mode
        if mode == "none":
            return guide_none(z)
        if z_m is None:
            raise ShapeError(f"mode {mode!r} needs motion hidden states")
        return {"gated": guide, "add": guide_add, "concat_mlp": guide_concat_mlp}[mode](self, z, z_m)

    def motion_features(self, z_m: Tensor) -> Tensor:
        """h_motion = LN(W_proj z_m), the keys and values of the gated cross-attention."""
        return self.ln_m(self.proj(z_m))

    def cross_attention(self, z: Tensor, z_m: Tensor) -> Tensor:
        return self.attn(self.ln_q(z), self.motion_features(z_m))


def _require(mod: GuidanceModule, mode: str) -> None:
    if mod.cfg.mode != mode:
        raise ConfigError(f"module built for mode {mod.cfg.mode!r}, called as {mode!r}")


def guide(mod: GuidanceModule, z: Tensor, z_m: Tensor) -> Tensor:
    _require(mod, "gated")
    mod._check(z, z_m)
    return z + sigmoid(mod.gate) * mod.cross_attention(z, z_m)


def guide_add(mod: GuidanceModule, z: Tensor, z_m: Tensor) -> Tensor:
    """z + resampled projection of z_m, with no gate."""
    _require(mod, "add")
    mod._check(z, z_m)
    if z_m.shape[1] != mod.cfg.m_tokens or z.shape[1] != mod.cfg.z_tokens:
        raise ShapeError(f"add guidance built for {mod.cfg.m_tokens} -> {mod.cfg.z_tokens} tokens")
    h = mod.proj(z_m)  # [B, L_m, d_z]
    pooled = (h.swapaxes(1, 2) @ mod.resample).swapaxes(1, 2)  # [B, L_z, d_z]
    return z + pooled


def guide_concat_mlp(mod: GuidanceModule, z: Tensor, z_m: Tensor) -> Tensor:
    """MLP([z ; mean(z_m)]) per token. No residual: the MLP output replaces z."""
    _require(mod, "concat_mlp")
    mod._check(z, z_m)
    b, lz, _ = z.shape
    d_m = mod.cfg.d_m
    summary = expand(z_m.mean(axis=1).reshape(b, 1, d_m), (b, lz, d_m))
    return mod.mlp(concat([z, summary], axis=2))


def guide_none(z: Tensor) -> Tensor:
    return z
