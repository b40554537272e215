"""Desk-scale pipeline in one process: datagen, Stage 1, Stage 2, held-out checks, paired eval.

    python3 scripts/train_desk.py --out runs/desk [--mode gated] [--episodes 100]
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from lamp.checkpoint import checkpoint_bytes
from lamp.config import DatagenConfig, EvalConfig, Stage1Config, Stage2Config
from lamp.gradcore import Rng
from lamp.motionrep import GridSpec
from lamp.runtime import BundlePolicy, PolicyBundle, evaluate
from lamp.toyworld.dataset import generate_dataset
from lamp.trainer import heldout_flow_mse, load_checkpoint, train_stage1, train_stage2


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--mode", default="gated", choices=["gated", "add", "concat_mlp", "none"])
    ap.add_argument("--stage1-steps", type=int, default=Stage1Config().steps)
    ap.add_argument("--stage2-steps", type=int, default=Stage2Config().steps)
    ap.add_argument("--episodes", type=int, default=EvalConfig().episodes, help="eval episodes per task per seed")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = replace(DatagenConfig(), seed=args.seed)
    grid = GridSpec(d.K_h, d.K_w, d.T, d.image, d.image)
    train = generate_dataset(d.task_list(), d.episodes, grid, d.horizon, Rng(d.seed), out / "train.lampds")
    held = generate_dataset(d.task_list(), d.heldout_episodes, grid, d.horizon, Rng(d.seed + 1000),
                            out / "heldout.lampds")

    s1 = train_stage1(replace(Stage1Config(), steps=args.stage1_steps, seed=args.seed), train, out)
    flow = heldout_flow_mse(load_checkpoint(checkpoint_bytes(s1.checkpoint)), held, Rng(args.seed))
    s2 = train_stage2(replace(Stage2Config(), steps=args.stage2_steps, guidance_mode=args.mode, seed=args.seed),
                      train, load_checkpoint(checkpoint_bytes(s1.checkpoint)), out)

    ev = replace(EvalConfig(), episodes=args.episodes)
    bundle = PolicyBundle.from_checkpoint(load_checkpoint(checkpoint_bytes(s2.checkpoint)), label=args.mode)
    report = evaluate({args.mode: BundlePolicy(bundle)}, ev.task_list(), ev.episodes, ev.seed_list(), ev.max_steps)
    (out / "eval_report.json").write_text(report.to_json())
    summary = {"stage1_probe": [s1.probe_initial, s1.probe_final], "stage1_seconds": s1.seconds,
               "heldout_flow_mse": flow, "stage2_probe": [s2.probe_initial, s2.probe_final],
               "stage2_seconds": s2.seconds, "gate_final": s2.gate_trace[-1] if s2.gate_trace else None}
    (out / "desk_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))
    print(report.table(), end="")


if __name__ == "__main__":
    main()
