"""Small trainable stand-in for the vision-language backbone.

Encodes an RGB-D observation and an instruction id into context tokens
``z`` of shape [B, 1 + P, d_z]: one instruction token followed by P visual
patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamp.errors import ShapeError
from lamp.gradcore import (
    MLP,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Rng,
    Tensor,
    concat,
)
from lamp.toyworld.world import NUM_INSTRUCTIONS


@dataclass(frozen=True)
class PerceptConfig:
    image_size: int = 32
    patch: int = 8
    channels: int = 4
    d_z: int = 64
    layers: int = 2
    heads: int = 4
    n_instructions: int = NUM_INSTRUCTIONS
    far: float = 1.5

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches


class Block(Module):
    """Pre-LN transformer block with self-attention and an optional cross-attention."""

    def __init__(self, d: int, heads: int, rng: Rng, d_ctx: int | None = None, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng.spawn(0))
        self.ln_ctx = LayerNorm(d) if d_ctx else None
        self.cross = MultiHeadAttention(d, heads, rng.spawn(1), d_kv=d_ctx) if d_ctx else None
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng.spawn(2))

    def forward(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x))
        if self.cross is not None:
            x = x + self.cross(self.ln_ctx(x), ctx)
        return x + self.mlp(self.ln2(x))


def patchify_image(obs: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)(W/p), C*p*p], patches row-major."""
    b, c, h, w = obs.shape
    x = obs.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PerceptionEncoder(Module):
    def __init__(self, cfg: PerceptConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_z
        self.patch_embed = Linear(cfg.channels * cfg.patch * cfg.patch, d, rng.spawn(0))
        self.instruction = Embedding(cfg.n_instructions, d, rng.spawn(1), std=1.0)
        self.pos = Parameter(rng.spawn(2).normal((cfg.num_tokens, d)) * 0.02)
        self.blocks = [Block(d, cfg.heads, rng.spawn(10 + i)) for i in range(cfg.layers)]
        self.ln_f = LayerNorm(d)

    def prepare(self, obs: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        obs = np.asarray(obs)
        if obs.ndim != 4 or obs.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"observation {obs.shape} does not match [B, {cfg.channels}, "
                             f"{cfg.image_size}, {cfg.image_size}]")
        x = obs.astype(np.float64, copy=True)
        x[:, 3] /= cfg.far
        return patchify_image(x, cfg.patch)

    def forward(self, obs: np.ndarray, instruction) -> Tensor:
        ids = np.asarray(instruction, dtype=np.int64).reshape(-1)
        patches = Tensor(self.prepare(obs))
        if len(ids) != patches.shape[0]:
            raise ShapeError(f"{len(ids)} instructions for {patches.shape[0]} observations")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.n_instructions):
            raise ValueError(f"instruction id out of range [0, {self.cfg.n_instructions})")
        b = len(ids)
        tok = self.instruction(ids).reshape(b, 1, self.cfg.d_z)
        x = concat([tok, self.patch_embed(patches)], axis=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


def encode(obs: np.ndarray, instruction, enc: PerceptionEncoder) -> Tensor:
    return enc(obs, instruction)


def freeze(enc: PerceptionEncoder) -> None:
    enc.freeze()
