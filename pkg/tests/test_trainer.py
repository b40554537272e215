import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_S1, TINY_S2
from lamp import trainer
from lamp.checkpoint import checkpoint_bytes
from lamp.errors import ConfigError, TrainingError
from lamp.gradcore import Rng
from lamp.motionrep import GridSpec
from lamp.toyworld.dataset import generate_dataset


def test_stage1_outputs(tiny_stage1):
    res = tiny_stage1
    assert len(res.losses) == TINY_S1.steps
    assert np.isfinite(res.probe_initial) and np.isfinite(res.probe_final)
    assert res.checkpoint.config["kind"] == "stage1"
    assert res.trace_text().splitlines()[0].startswith("0 ")


def test_stage1_is_deterministic(tiny_data, tiny_stage1, tmp_path):
    again = trainer.train_stage1(TINY_S1, tiny_data, tmp_path)
    assert again.trace_text() == tiny_stage1.trace_text()
    assert checkpoint_bytes(again.checkpoint) == checkpoint_bytes(tiny_stage1.checkpoint)
    assert (tmp_path / "stage1.ckpt").read_bytes() == checkpoint_bytes(again.checkpoint)
    lines = (tmp_path / "stage1_manifest.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == list(range(TINY_S1.steps))
    timing = [json.loads(x) for x in (tmp_path / "stage1_timing.jsonl").read_text().splitlines()]
    assert [t["step"] for t in timing] == list(range(TINY_S1.steps))


def test_manifests_are_byte_identical_across_runs(tiny_data, tmp_path):
    for run in ("a", "b"):
        trainer.train_stage1(TINY_S1, tiny_data, tmp_path / run)
    a, b = ((tmp_path / run / "stage1_manifest.jsonl").read_bytes() for run in ("a", "b"))
    assert a == b and b"wall" not in a


def test_stage2_freeze_contract(tiny_stage1, tiny_stage2):
    h = tiny_stage2.frozen_hashes
    assert h["before"] == h["after"]
    assert h["before"]["motion"] == tiny_stage1.checkpoint.modules["motion"].param_hash()
    assert h["before"]["percept"] == tiny_stage1.checkpoint.modules["percept"].param_hash()
    assert tiny_stage2.checkpoint.config["stage1_hashes"] == h["before"]


def test_stage2_logs_gate(tiny_stage2):
    assert len(tiny_stage2.gate_trace) == TINY_S2.steps


def test_gate_gradient_nonzero_in_manifest(tiny_data, tiny_stage1, tmp_path):
    s1 = trainer.load_checkpoint(checkpoint_bytes(tiny_stage1.checkpoint))
    trainer.train_stage2(replace(TINY_S2, steps=3), tiny_data, s1, tmp_path)
    recs = [json.loads(x) for x in (tmp_path / "stage2_manifest.jsonl").read_text().splitlines()]
    # the zero-initialized action head blocks every upstream gradient on the very first step
    assert recs[0]["gate_grad"] == 0.0
    assert all(r["gate_grad"] != 0.0 for r in recs[1:])


def test_mode_none_never_calls_motion_expert(tiny_data, tiny_stage1):
    s1 = trainer.load_checkpoint(checkpoint_bytes(tiny_stage1.checkpoint))
    before = s1.modules["motion"].velocity_calls
    res = trainer.train_stage2(replace(TINY_S2, guidance_mode="none", steps=2), tiny_data, s1)
    assert s1.modules["motion"].velocity_calls == before
    assert res.gate_trace == []


def test_freeze_violation_is_detected(tiny_data, tiny_stage1, monkeypatch):
    s1 = trainer.load_checkpoint(checkpoint_bytes(tiny_stage1.checkpoint))
    calls = {"n": 0}
    real = trainer.frozen_hashes

    def drifting(mods):
        calls["n"] += 1
        h = real(mods)
        return h if calls["n"] == 1 else {**h, "motion": "changed"}

    monkeypatch.setattr(trainer, "frozen_hashes", drifting)
    with pytest.raises(TrainingError, match="frozen"):
        trainer.train_stage2(replace(TINY_S2, steps=2), tiny_data, s1)


def test_incompatible_dataset_rejected(tiny_stage1, tmp_path):
    other = generate_dataset(["push"], 1, GridSpec(), 3, Rng(0), tmp_path / "h3")
    with pytest.raises(ConfigError):
        trainer.train_stage2(TINY_S2, other, trainer.load_checkpoint(checkpoint_bytes(tiny_stage1.checkpoint)))


def test_batch_order_is_an_epoch_permutation():
    order = trainer.BatchOrder(10, 4, Rng(0))
    seen = np.concatenate([order.indices(s) for s in range(3)])
    assert len(seen) == 12
    assert len(set(seen[:8].tolist())) == 8  # no repeats inside an epoch
    np.testing.assert_array_equal(order.indices(1), trainer.BatchOrder(10, 4, Rng(0)).indices(1))


def test_depth_masked_targets(tiny_data):
    idx = np.arange(4)
    tok, w = trainer.motion_targets(tiny_data, idx, depth_masked=True)
    assert tok.shape == (4, 128, 12) and w.shape == tok.shape
    assert np.all(tok.reshape(4, 128, 4, 3)[..., 2] == 0)
    full, _ = trainer.motion_targets(tiny_data, idx)
    np.testing.assert_array_equal(full.reshape(4, 128, 4, 3)[..., :2], tok.reshape(4, 128, 4, 3)[..., :2])


def test_invalid_step_counts():
    with pytest.raises(ConfigError):
        trainer.train_stage1(replace(TINY_S1, batch_size=0), None)
