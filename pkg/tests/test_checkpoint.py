import struct

import numpy as np
import pytest

from lamp.checkpoint import Checkpoint, checkpoint_bytes, load_into, parse_checkpoint, save_checkpoint
from lamp.errors import FormatError
from lamp.gradcore import Linear, Rng
from lamp.trainer import load_checkpoint


def _ckpt(seed=0, **kw):
    return Checkpoint({"kind": "toy", "note": "x"}, {"lin": Linear(3, 2, Rng(seed))}, **kw)


def test_round_trip_is_bit_exact(tmp_path):
    ck = _ckpt(optimizer_step=7, optimizer_moments={"optim.m/lin/weight": np.ones((3, 2), np.float32)})
    blob = save_checkpoint(ck, tmp_path / "a.ckpt")
    config, tensors, step = parse_checkpoint((tmp_path / "a.ckpt").read_bytes())
    assert config == ck.config and step == 7
    for name, arr in ck.tensors().items():
        assert tensors[name].tobytes() == arr.tobytes()
    fresh = {"lin": Linear(3, 2, Rng(99))}
    load_into(fresh, tensors)
    again = Checkpoint(config, fresh, step, {k: v for k, v in tensors.items() if k.startswith("optim.")})
    assert checkpoint_bytes(again) == blob


def test_serialization_is_deterministic():
    assert checkpoint_bytes(_ckpt()) == checkpoint_bytes(_ckpt())
    assert checkpoint_bytes(_ckpt(0)) != checkpoint_bytes(_ckpt(1))


@pytest.mark.parametrize("where", ["magic", "meta", "payload", "digest"])
def test_any_flipped_byte_is_detected(where):
    blob = bytearray(checkpoint_bytes(_ckpt()))
    pos = {"magic": 0, "meta": 30, "payload": len(blob) - 40, "digest": len(blob) - 1}[where]
    blob[pos] ^= 0x10
    with pytest.raises(FormatError):
        parse_checkpoint(bytes(blob))


def _rehash(body: bytes) -> bytes:
    import hashlib

    return body + hashlib.sha256(body).digest()


def test_version_magic_and_trailing_bytes_with_valid_hash():
    body = checkpoint_bytes(_ckpt())[:-32]
    with pytest.raises(FormatError, match="version"):
        parse_checkpoint(_rehash(body[:8] + struct.pack("<I", 2) + body[12:]))
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(_rehash(b"NOTACKPT" + body[8:]))
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(_rehash(body + b"\0\0\0\0"))
    with pytest.raises(FormatError):
        parse_checkpoint(_rehash(body[:-4]))
    with pytest.raises(FormatError):
        parse_checkpoint(b"short")


def test_missing_parameter_is_reported():
    _, tensors, _ = parse_checkpoint(checkpoint_bytes(_ckpt()))
    del tensors["lin/bias"]
    with pytest.raises(FormatError, match="lin/bias"):
        load_into({"lin": Linear(3, 2, Rng(0))}, tensors)


def test_float64_tensors_refused():
    ck = _ckpt()
    ck.modules["lin"].weight.data = ck.modules["lin"].weight.data.astype(np.float64)
    with pytest.raises(FormatError):
        checkpoint_bytes(ck)


def test_trained_checkpoints_round_trip(tiny_stage1, tiny_stage2):
    for res in (tiny_stage1, tiny_stage2):
        blob = checkpoint_bytes(res.checkpoint)
        again = load_checkpoint(blob)
        assert checkpoint_bytes(again) == blob
        for comp, mod in res.checkpoint.modules.items():
            assert again.modules[comp].param_hash() == mod.param_hash()
