"""Parameters, modules and the neural building blocks used by every model."""

from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from lamp.errors import ConfigError, ShapeError
from lamp.gradcore import tensor as T
from lamp.gradcore.rng import Rng
from lamp.gradcore.tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. Freezing turns off gradient recording for it."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Container that discovers parameters and submodules through its attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} vs parameter {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def param_hash(self) -> str:
        """SHA-256 over parameter names, shapes and raw bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(rng: Rng, shape, std: float) -> Parameter:
    return Parameter(rng.normal(shape) * std)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero:
            self.weight = Parameter(np.zeros((d_in, d_out)))
        else:
            # xavier-uniform
            limit = math.sqrt(6.0 / (d_in + d_out))
            self.weight = Parameter((rng.uniform((d_in, d_out)) * 2 - 1) * limit)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects width {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, affine: bool = True, eps: float = 1e-5):
        self.d, self.eps = d, eps
        self.scale = Parameter(np.ones(d)) if affine else None
        self.shift = Parameter(np.zeros(d)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: Rng, std: float = 1.0):
        self.table = _param(rng, (n, d), std)

    def forward(self, ids) -> Tensor:
        return T.embedding(self.table, ids)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: Rng, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention split over ``heads``; inputs are already projected.

    q: [..., Lq, d], k and v: [..., Lk, d]; returns [..., Lq, d].
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape != k.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    dh = d // heads
    lead = q.shape[:-2]
    nl = len(lead)
    lq, lk = q.shape[-2], k.shape[-2]
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    qh = T.transpose(q.reshape(*lead, lq, heads, dh), perm)
    kh = T.transpose(k.reshape(*lead, lk, heads, dh), perm[:nl] + (nl + 1, nl + 2, nl))
    vh = T.transpose(v.reshape(*lead, lk, heads, dh), perm)
    scores = T.matmul(qh, kh) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, vh)
    return T.transpose(out, perm).reshape(*lead, lq, d)


class MultiHeadAttention(Module):
    """Multi-head attention with query/key/value/output projections.

    ``d_kv`` lets the keys come from a sequence of a different width
    (cross-attention onto context tokens).
    """

    def __init__(self, d: int, heads: int, rng: Rng, d_kv: int | None = None):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        d_kv = d if d_kv is None else d_kv
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d_kv, d, rng)
        self.v_proj = Linear(d_kv, d, rng)
        self.o_proj = Linear(d, d, rng)

    def forward(self, xq: Tensor, xkv: Tensor | None = None) -> Tensor:
        xkv = xq if xkv is None else xkv
        q, k, v = self.q_proj(xq), self.k_proj(xkv), self.v_proj(xkv)
        return self.o_proj(attention(q, k, v, self.heads))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         out_weight: Tensor, out_bias: Tensor | None = None) -> Tensor:
    """Functional form: per-head attention over projected q/k/v, then the output projection."""
    y = T.matmul(attention(q, k, v, heads), out_weight)
    return y + out_bias if out_bias is not None else y


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of scalar times ``t`` (shape [B]) -> [B, dim].

    Times are scaled by 1000 so the unit interval spans many periods.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb.astype(T.get_default_dtype())


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """AdaLN modulation ``x * (1 + scale) + shift`` with per-sample [B, d] shift/scale."""
    shape = x.shape
    b, d = shape[0], shape[-1]
    mid = (1,) * (len(shape) - 2)
    scale_e = T.expand(scale.reshape(b, *mid, d), shape)
    shift_e = T.expand(shift.reshape(b, *mid, d), shape)
    return x * (scale_e + 1.0) + shift_e


def gate(x: Tensor, g: Tensor) -> Tensor:
    """Scale [B, ..., d] activations by a per-sample [B, d] gate."""
    shape = x.shape
    mid = (1,) * (len(shape) - 2)
    return x * T.expand(g.reshape(shape[0], *mid, shape[-1]), shape)
