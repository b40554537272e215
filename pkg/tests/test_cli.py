import json
import subprocess
import sys

import pytest

from lamp.cli import main
from lamp.toyworld.dataset import load_dataset

TINY_CFG = """
datagen.episodes = 1
datagen.heldout_episodes = 1
stage1.steps = 3
stage1.batch_size = 4
stage1.d_z = 16
stage1.percept_layers = 1
stage1.percept_heads = 2
stage1.d_m = 16
stage1.motion_layers = 1
stage1.motion_heads = 2
stage1.time_dim = 8
stage1.probe_batches = 1
stage2.steps = 3
stage2.batch_size = 4
stage2.d_a = 16
stage2.action_layers = 1
stage2.action_heads = 2
stage2.time_dim = 8
stage2.guidance_heads = 2
stage2.guidance_hidden = 16
stage2.probe_batches = 1
eval.episodes = 1
eval.seeds = 0
eval.max_steps = 4
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    base = ["--config", str(cfg), "--seed", "3", "--out", str(root)]
    assert main(["datagen", *base]) == 0
    assert main(["train-motion", *base, "--data", str(root / "train.lampds")]) == 0
    assert main(["train-action", *base, "--data", str(root / "train.lampds"),
                 "--stage1", str(root / "stage1.ckpt")]) == 0
    assert main(["eval", *base, "--policy", f"gated={root / 'stage2.ckpt'}"]) == 0
    return root


def test_pipeline_outputs(run):
    for name in ("train.lampds", "heldout.lampds", "stage1.ckpt", "stage1_losses.txt", "stage2.ckpt",
                 "stage2_manifest.jsonl", "eval_report.json", "eval_table.txt", "eval_timing.json"):
        assert (run / name).exists(), name
    assert len(load_dataset(run / "train.lampds")) > 0
    doc = json.loads((run / "eval_report.json").read_text())
    assert {r["variant"] for r in doc["rows"]} == {"gated"}
    assert len(doc["rows"]) == 3


def test_visualize(run, capsys):
    assert main(["visualize", "--ckpt", str(run / "stage2.ckpt"), "--out", str(run / "viz")]) == 0
    assert (run / "viz.ppm").exists() and (run / "viz.svg").exists()


def test_datagen_zero_episodes_is_valid(tmp_path):
    assert main(["datagen", "--episodes", "0", "--heldout", "0", "--out", str(tmp_path)]) == 0
    assert len(load_dataset(tmp_path / "train.lampds")) == 0


def test_config_reference(capsys):
    assert main(["config"]) == 0
    assert "stage2.guidance_mode" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["datagen", "--nope"], ["train-action", "--data", "x"],
                                  ["train-action", "--data", "x", "--stage1", "y", "--mode", "sum"]])
def test_bad_arguments_exit_nonzero(argv):
    assert main(argv) != 0


def test_unknown_ablation_variant(tmp_path, capsys):
    main(["datagen", "--episodes", "0", "--heldout", "0", "--out", str(tmp_path)])
    assert main(["ablate", "--data", str(tmp_path / "train.lampds"), "--variants", "gated,bogus"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "lamp.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "selftest" in out.stdout
