"""``LAMPCK1`` checkpoints.

Byte layout (little-endian)::

    offset  size      field
    0       8         magic b"LAMPCK1\\0"
    8       4  u32    format version (1)
    12      4  u32    reserved (0)
    16      8  u64    metadata length M
    24      M         metadata, canonical JSON (sorted keys, no spaces):
                        {"config": {...}, "tensors": [[name, shape], ...],
                         "optimizer_step": int | null}
    24+M    ...       tensor payload, f32 each, in metadata order
    end-32  32        SHA-256 of every preceding byte

Tensor names are ``<component>/<parameter>``; optimizer moments are stored
as ``optim.m/<name>`` and ``optim.v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lamp.errors import FormatError
from lamp.gradcore import Module

MAGIC = b"LAMPCK1\0"
VERSION = 1
_HEAD = struct.Struct("<8sIIQ")
DIGEST = 32


@dataclass
class Checkpoint:
    config: dict
    modules: dict[str, Module]
    optimizer_step: int | None = None
    optimizer_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for comp in sorted(self.modules):
            for name, p in self.modules[comp].named_parameters():
                out[f"{comp}/{name}"] = p.data
        for name in sorted(self.optimizer_moments):
            out[name] = self.optimizer_moments[name]
        return out


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise FormatError(f"{name}: checkpoints store float32 tensors, got {arr.dtype}")
    meta = _canonical({
        "config": ckpt.config,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
        "optimizer_step": ckpt.optimizer_step,
    })
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in tensors.values())
    body = _HEAD.pack(MAGIC, VERSION, 0, len(meta)) + meta + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> bytes:
    blob = checkpoint_bytes(ckpt)
    Path(path).write_bytes(blob)
    return blob


def parse_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray], int | None]:
    """Verify and decode a checkpoint into (config, tensors by name, optimizer step)."""
    if len(blob) < _HEAD.size + DIGEST:
        raise FormatError("checkpoint is truncated")
    body, digest = blob[:-DIGEST], blob[-DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint hash mismatch")
    magic, version, _, meta_len = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(body[_HEAD.size:_HEAD.size + meta_len])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from None
    pos = _HEAD.size + meta_len
    tensors = {}
    for name, shape in meta["tensors"]:
        n = math.prod(shape)
        if pos + 4 * n > len(body):
            raise FormatError("checkpoint payload shorter than its tensor table")
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise FormatError("trailing bytes after checkpoint payload")
    return meta["config"], tensors, meta["optimizer_step"]


def load_into(modules: dict[str, Module], tensors: dict[str, np.ndarray]) -> None:
    """Copy stored tensors into freshly built modules; every parameter must be present."""
    for comp, mod in modules.items():
        state = {}
        for name, _ in mod.named_parameters():
            key = f"{comp}/{name}"
            if key not in tensors:
                raise FormatError(f"checkpoint is missing parameter {key!r}")
            state[name] = tensors[key]
        mod.load_state_dict(state)
